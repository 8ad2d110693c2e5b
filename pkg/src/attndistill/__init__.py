"""Sparse distillation of convolutional teachers into local-attention students."""

from .config import TrainConfig
from .distill import DistillConfig
from .errors import (
    AttnDistillError,
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    ShapeError,
    TrainingDiverged,
)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "DistillConfig",
    "Tensor",
    "AttnDistillError",
    "ConfigError",
    "ContractError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "TrainingDiverged",
    "__version__",
]
