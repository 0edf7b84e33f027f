"""Event-aware world model: event generation, event-gated losses and a
recurrent state-space world model with an imagination-trained actor-critic."""

from .errors import (
    ConfigError,
    ContractViolation,
    DomainError,
    EAWMError,
    NumericError,
    SchemaError,
    UnavailableError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DomainError",
    "EAWMError",
    "NumericError",
    "SchemaError",
    "UnavailableError",
    "__version__",
]
