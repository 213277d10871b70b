"""Exception types shared across the package."""


class ContractError(RuntimeError):
    """An operation was called in a way its contract forbids."""


class DimensionError(ContractError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class NaNError(FloatingPointError):
    """A NaN reached a primitive that refuses to propagate it."""


class EmptyInputError(ValueError):
    """A required collection (views, points, archive entries) is empty."""
