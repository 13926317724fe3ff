"""Exception types shared across the package."""


class MixvaeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MixvaeError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class ConfigError(MixvaeError, ValueError):
    """A configuration value is out of range or a config key is unknown."""


class UsageError(MixvaeError, RuntimeError):
    """An API was called in a way its contract forbids."""


class DatasetError(MixvaeError, ValueError):
    """A manifest or corpus failed validation."""


class NonFiniteLossError(MixvaeError, RuntimeError):
    """Training produced a NaN or infinite loss term."""
