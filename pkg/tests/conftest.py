import pytest

from attndistill.config import TrainConfig
from attndistill import train as TR

TINY = dict(
    dataset="synthetic",
    synth_train=200,
    synth_test=100,
    classes=2,
    batch_size=25,
    seed=7,
    deterministic=True,
    depth="toy",
    heads=2,
    extent=3,
)


def tiny_config(out_dir, **overrides):
    merged = dict(TINY)
    merged.update(overrides)
    return TrainConfig(out_dir=str(out_dir), **merged)


@pytest.fixture(scope="session")
def tiny_teacher(tmp_path_factory):
    """A small trained toy teacher shared across trainer tests."""
    out = tmp_path_factory.mktemp("teacher")
    cfg = tiny_config(out, epochs=5, lr=0.05, lr_drops=(4,), variant="conv")
    ckpt, metrics = TR.train_teacher(cfg)
    return {"ckpt": ckpt, "metrics": metrics, "cfg": cfg}
