"""Exception hierarchy shared by every fastmetro module."""


class FastMetroError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FastMetroError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(FastMetroError, ValueError):
    """A configuration value or combination of values is invalid."""


class DataError(FastMetroError, ValueError):
    """Input data (files, meshes, matrices) violates its format or invariants."""


class NumericError(FastMetroError, ArithmeticError):
    """A non-finite value appeared, or an iterative routine failed to converge."""


class TrainingError(FastMetroError, RuntimeError):
    """Training had to abort (non-finite loss or gradient)."""
