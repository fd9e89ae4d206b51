"""Desk-scale distance-weighted transformer inpainting network on a numpy autodiff core."""

from .errors import ConfigError, DimensionError, NumericError, UsageError
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
