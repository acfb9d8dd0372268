"""Exception types shared across the package; the CLI maps each to an exit code."""


class ConfigError(ValueError):
    """Invalid run configuration (exit code 1)."""


class DataError(ValueError):
    """Unreadable or inconsistent input data (exit code 2)."""


class NumericalError(ArithmeticError):
    """NaN/inf during training or a failed gradient check (exit code 3)."""
