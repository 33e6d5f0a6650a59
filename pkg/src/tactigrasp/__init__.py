"""Tactile touch/slip perception and slip-driven grip-force control on synthetic sensor data."""

from .errors import (
    DatasetError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    GeometryError,
    NumericError,
    StateMachineError,
    TactigraspError,
    UnknownVariantError,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetError",
    "DegenerateInputError",
    "DimensionError",
    "FormatError",
    "GeometryError",
    "NumericError",
    "StateMachineError",
    "TactigraspError",
    "UnknownVariantError",
    "__version__",
]
