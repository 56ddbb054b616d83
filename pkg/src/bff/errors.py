"""Exception types shared across the package."""


class BffError(Exception):
    """Base class for package errors."""


class ConfigError(BffError):
    """Invalid configuration value or combination."""


class ShapeError(BffError):
    """Array shapes do not conform for the requested primitive."""


class UsageError(BffError):
    """API called out of order or against its contract."""


class DataFormatError(BffError):
    """Malformed cohort / embedding / checkpoint file."""


class NumericsError(BffError):
    """Non-finite or out-of-domain value reached a numeric primitive."""


class MetricUndefinedError(BffError):
    """Requested metric has no defined value on the given data."""
