"""Exception types shared across the package."""


class TactigraspError(Exception):
    """Base class; ``category`` is the machine-readable tag the CLI prints."""

    category = "error"


class DimensionError(TactigraspError, ValueError):
    category = "dimension-mismatch"


class GeometryError(TactigraspError, ValueError):
    category = "geometry-mismatch"


class NumericError(TactigraspError, ArithmeticError):
    category = "numeric"


class DegenerateInputError(NumericError):
    """Raised by gradient checks when the input sits on a singular point of the op."""

    category = "degenerate-input"


class FormatError(TactigraspError, ValueError):
    category = "format"


class DatasetError(TactigraspError):
    category = "dataset-error"


class StateMachineError(TactigraspError, RuntimeError):
    category = "state-machine"


class UnknownVariantError(TactigraspError, KeyError):
    category = "unknown-variant"
