"""Exception types shared across the package."""


class EAWMError(Exception):
    """Base class for all package errors."""


class ContractViolation(EAWMError, ValueError):
    """Raised when inputs break an operation's shape or argument contract."""


class DomainError(EAWMError, ValueError):
    """Raised when a value falls outside an operation's mathematical domain."""


class NumericError(EAWMError, FloatingPointError):
    """Raised when a loss or gradient becomes non-finite.

    ``component`` names the first offending term so runs can be diagnosed
    from the log alone.
    """

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class ConfigError(EAWMError, KeyError):
    """Raised for unknown or malformed configuration keys."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UnavailableError(EAWMError, LookupError):
    """Raised when a resource (e.g. an empty replay buffer) cannot serve a request."""


class SchemaError(EAWMError, ValueError):
    """Raised when a binary file has the wrong magic, version or schema id."""
