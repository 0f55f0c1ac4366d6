"""Exception types shared across the package."""


class DualPathError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(DualPathError, ValueError):
    """Invalid dimensions, shapes, or settings."""


class DataError(DualPathError, ValueError):
    """Malformed or inconsistent input data."""


class DegenerateInputError(DualPathError, ValueError):
    """An input for which the quantity is undefined (e.g. a zero-norm vector)."""


class NumericError(DualPathError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class CheckpointError(DualPathError):
    """Unreadable, truncated, or version-incompatible checkpoint."""
