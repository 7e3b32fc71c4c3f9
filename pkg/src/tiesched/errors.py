"""Exception types shared across the package."""


class TieError(Exception):
    """Base class for all package errors."""


class DomainError(TieError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class UsageError(TieError, ValueError):
    """An API was called in a state or combination it does not support."""


class InsufficientDataError(TieError, ValueError):
    """Too few samples (or tail points) for an estimator."""


class ConfigError(TieError, ValueError):
    """Invalid or unknown configuration values."""


class TraceParseError(TieError, ValueError):
    """A trace or sample file could not be parsed.

    ``lineno`` is 1-based and ``field`` names the offending key when known.
    """

    def __init__(self, message, lineno=None, field=None):
        self.lineno = lineno
        self.field = field
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{message}")
