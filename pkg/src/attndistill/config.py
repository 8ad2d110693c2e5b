"""Run configuration: one flat dataclass mirroring the CLI flags.

A JSON config file may supply any field; explicit CLI flags override the
file, and everything else falls back to the defaults below. The full
resolved config is embedded in every checkpoint manifest and metrics run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .distill import DistillConfig
from .errors import ConfigError


@dataclass
class TrainConfig:
    # run
    out_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = False
    # data
    dataset: str = "synthetic"  # synthetic | cifar10 | cifar100
    data_dir: str = ""
    classes: int = 2
    synth_train: int = 1000
    synth_test: int = 500
    # optimization
    epochs: int = 30
    batch_size: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drops: tuple = (18, 24, 27)
    lr_drop_factor: float = 0.1
    # model
    depth: str = "toy"  # toy | student26 | student38 | teacher50
    variant: str = "hybrid"  # conv | hybrid | homogeneous
    extent: int = 3
    heads: int = 2
    pos_scale: str = "fourth-root"
    # distillation
    alpha: float = 0.1
    beta: float = 1000.0
    temperature: float = 4.0
    map_power: float = 2.0
    temperature_sq_correction: bool = True
    # sparsity
    density: float = 0.25
    prune_mode: str = "irregular"  # irregular | column
    prune_rate0: float = 0.5
    stem_prunable: bool = True

    def __post_init__(self):
        if self.dataset not in ("synthetic", "cifar10", "cifar100"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "cifar10":
            self.classes = 10
        elif self.dataset == "cifar100":
            self.classes = 100
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and momentum in [0, 1)")
        if not 0 < self.density <= 1:
            raise ConfigError(f"density must be in (0, 1], got {self.density}")
        if self.prune_mode not in ("irregular", "column"):
            raise ConfigError(f"unknown prune mode {self.prune_mode!r}")
        if not 0 <= self.prune_rate0 < 1:
            raise ConfigError(f"prune_rate0 must be in [0, 1), got {self.prune_rate0}")
        self.lr_drops = tuple(int(e) for e in self.lr_drops)
        # range checks for the distillation fields
        DistillConfig(self.alpha, self.beta, self.temperature, self.map_power)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            alpha=self.alpha,
            beta=self.beta,
            temperature=self.temperature,
            map_power=self.map_power,
            temperature_sq_correction=self.temperature_sq_correction,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = list(self.lr_drops)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "TrainConfig":
        """Defaults <- JSON file <- explicit overrides, in that order."""
        base: dict = {}
        if path:
            with open(path) as f:
                try:
                    base = json.load(f)
                except json.JSONDecodeError as e:
                    raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if overrides:
            base.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(base)
