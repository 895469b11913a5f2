"""Discriminative feature network for semantic segmentation, built on a small numpy autodiff core."""

from .errors import (
    ConfigurationError,
    ConsistencyError,
    DataError,
    DFNError,
    DimensionError,
    FormatError,
    NumericalError,
    StatisticsError,
    UsageError,
)
from .losses import LossConfig, combined_loss, focal_loss, softmax_ce
from .model import DFN, ModelConfig, dfn_forward
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "DFN",
    "ConfigurationError",
    "ConsistencyError",
    "DFNError",
    "DataError",
    "DimensionError",
    "FormatError",
    "LossConfig",
    "ModelConfig",
    "NumericalError",
    "StatisticsError",
    "Tensor",
    "UsageError",
    "backward",
    "combined_loss",
    "dfn_forward",
    "focal_loss",
    "no_grad",
    "softmax_ce",
]
