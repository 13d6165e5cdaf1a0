"""Exception types shared across the package."""


class A2XPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(A2XPError, ValueError):
    """Invalid configuration value or combination."""


class DegenerateExpert(A2XPError):
    """An expert prompt whose norm is too small to normalize."""


class CacheInvalid(A2XPError):
    """Cached expert keys no longer match the bank or the heads."""


class InconsistentClasses(A2XPError):
    """Domain directories disagree on their class sub-directories."""


class NumericalFailure(A2XPError):
    """A loss or parameter became non-finite during training."""


class DatasetError(A2XPError):
    """A dataset directory or image could not be read."""
