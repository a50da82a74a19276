"""Low-rank attention transformer for spatiotemporal imputation."""

from .autodiff import Tensor, backward, no_grad
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    LrImputeError,
    NumericError,
    ParseError,
    TrainingDiverged,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "LrImputeError",
    "DimensionError",
    "ContractError",
    "ParseError",
    "ConfigError",
    "NumericError",
    "TrainingDiverged",
    "__version__",
]
