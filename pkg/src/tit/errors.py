"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An architecture, data or run configuration is invalid."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class UnknownTaskError(KeyError):
    """A task id or name is not registered."""
