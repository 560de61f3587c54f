"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor shape violates an operation's contract."""


class ConfigError(ValueError):
    """An invalid hyperparameter, block geometry or experiment config."""


class StateError(RuntimeError):
    """An operation was called in a state that does not support it."""
