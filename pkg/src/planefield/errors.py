"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes, so raise the most specific class.
"""


class PlaneFieldError(Exception):
    """Base class for every error raised by this package."""


class InputDomainError(PlaneFieldError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class NumericDomainError(PlaneFieldError, ArithmeticError):
    """A computation produced or received non-finite values."""


class FormatError(PlaneFieldError, ValueError):
    """A file on disk does not follow the expected layout."""


class CorruptionError(FormatError):
    """A checkpoint failed its content-hash check or was truncated."""


class ConfigError(PlaneFieldError, ValueError):
    """A configuration key is missing, unknown or has a bad value."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
