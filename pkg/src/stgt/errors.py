"""Exception types shared across the package."""


class StgtError(Exception):
    """Base class for all package errors."""


class ShapeError(StgtError, ValueError):
    pass


class NumericError(StgtError, ArithmeticError):
    pass


class StateError(StgtError, RuntimeError):
    pass


class ContractError(StgtError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ValidationError(StgtError, ValueError):
    pass


class ConfigError(StgtError, ValueError):
    pass


class LeakageError(StgtError, RuntimeError):
    """Raised when data from a later period (or augmented rows) would leak into a fit or an evaluation."""
