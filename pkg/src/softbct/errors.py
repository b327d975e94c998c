class SoftBCTError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SoftBCTError, ValueError):
    """Invalid structural constant, hyperparameter or flag combination."""


class NumericalError(SoftBCTError, ArithmeticError):
    """A recursion or factorization produced a non-finite or invalid value."""


class CapExceededError(SoftBCTError):
    """Enumeration would produce more objects than the configured cap."""


class DataError(SoftBCTError, ValueError):
    """Malformed or insufficient input data."""
