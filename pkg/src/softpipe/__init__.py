"""Differentiable summarize-then-translate pipeline on synthetic token tasks."""

__version__ = "0.1.0"

from softpipe.exceptions import (
    ContractError,
    DegenerateSummaryError,
    FormatError,
    NumericError,
    RangeError,
    ShapeError,
    SoftpipeError,
    StateError,
)

__all__ = [
    "__version__",
    "SoftpipeError",
    "ShapeError",
    "ContractError",
    "StateError",
    "FormatError",
    "RangeError",
    "NumericError",
    "DegenerateSummaryError",
]
