"""Exception hierarchy shared across the package."""


class SoftpipeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SoftpipeError, ValueError):
    """Tensor dimensions are incompatible for the requested operation."""


class ContractError(SoftpipeError, ValueError):
    """A caller violated a documented precondition."""


class StateError(SoftpipeError, RuntimeError):
    """An object was used in an invalid lifecycle state (e.g. a consumed tape)."""


class FormatError(SoftpipeError, ValueError):
    """A serialized artifact (checkpoint, dataset, config) is malformed."""


class RangeError(SoftpipeError, IndexError):
    """A token id falls outside the valid vocabulary range."""


class NumericError(SoftpipeError, ArithmeticError):
    """A computation produced a non-finite value where one is not allowed."""


class DegenerateSummaryError(SoftpipeError, RuntimeError):
    """The summarizer produced no content tokens, so no loss can be formed."""
