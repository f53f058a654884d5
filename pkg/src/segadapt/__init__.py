"""Source-free domain adaptation toolkit for semantic segmentation."""

__version__ = "0.1.0"

from .errors import (
    SegAdaptError,
    ParameterError,
    DatasetError,
    ValidationError,
    CheckpointError,
    NumericError,
    NonFiniteLossError,
)

__all__ = [
    "__version__",
    "SegAdaptError",
    "ParameterError",
    "DatasetError",
    "ValidationError",
    "CheckpointError",
    "NumericError",
    "NonFiniteLossError",
]
