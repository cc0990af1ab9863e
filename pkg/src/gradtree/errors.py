"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad hyperparameter, shape spec, or mode mismatch."""


class DataError(ValueError):
    """Malformed or degenerate input data."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where the math requires finite numbers."""
