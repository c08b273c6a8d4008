"""Cross-subject brain-signal encoder, alignment training and evaluation tools."""

from .core import (
    BrainAlignError,
    BrainSample,
    DataError,
    EncoderConfig,
    FeatureGrid,
    NumericError,
    SubjectSpec,
    TrainConfig,
    validate_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "BrainAlignError",
    "BrainSample",
    "DataError",
    "EncoderConfig",
    "FeatureGrid",
    "NumericError",
    "SubjectSpec",
    "TrainConfig",
    "validate_dataset",
]
