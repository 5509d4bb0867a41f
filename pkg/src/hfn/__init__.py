"""Heterogeneous Fusion Net: clip-wise video/audio/text fusion for short-video veracity classification."""

from hfn.errors import (
    AlignmentError,
    ContractError,
    HFNError,
    MissingInputError,
    MissingMediaError,
    NumericError,
    ShapeError,
    TrainingError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "ContractError",
    "HFNError",
    "MissingInputError",
    "MissingMediaError",
    "NumericError",
    "ShapeError",
    "TrainingError",
    "ValidationError",
    "__version__",
]
