"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class NumericError(ArithmeticError):
    """A non-finite value appeared or an iteration failed to converge."""


class UsageError(RuntimeError):
    """An API was called in a state where it cannot be honored."""
