"""Exception taxonomy shared across the package."""


class AttnDistillError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AttnDistillError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(AttnDistillError, RuntimeError):
    """An API precondition was violated by the caller."""


class ConfigError(AttnDistillError, ValueError):
    """A configuration value is out of range or inconsistent."""


class FormatError(AttnDistillError, ValueError):
    """A serialized file is malformed."""


class NumericError(AttnDistillError, ArithmeticError):
    """A computation produced non-finite values."""


class TrainingDiverged(NumericError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
