"""Exception hierarchy shared by every subsystem."""


class DFNError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DFNError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(DFNError, ValueError):
    """An operation was configured with values it cannot honour."""


class StatisticsError(DFNError, ValueError):
    """Too few elements to estimate batch statistics."""


class UsageError(DFNError, ValueError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class DataError(DFNError, ValueError):
    """Input data holds values outside the allowed range."""


class FormatError(DFNError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(DFNError, RuntimeError):
    """Internal state violates an invariant (e.g. a trainable param without a grad)."""


class NumericalError(DFNError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
