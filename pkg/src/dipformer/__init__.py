"""Depth-aware RGB-D semantic segmentation on a small numpy autodiff engine."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateBatchError,
    DimensionError,
    DipformerError,
    FormatError,
    GeometryError,
    TrainingDivergedError,
    UndefinedRecallError,
    UsageError,
)
from .model import ModelConfig, arm_config, forward, init_params, load_checkpoint, save_checkpoint
from .pe import PeKind
from .tensor import OpCounter, Precision, Tensor, no_grad, precision

__version__ = "0.1.0"
