"""Exception types shared across the package."""

__all__ = [
    "McvitError",
    "ShapeError",
    "ParameterError",
    "DegenerateInputError",
    "ContractError",
    "ConfigurationError",
    "NumericFailureError",
    "FormatError",
    "IntegrityError",
    "StateError",
]


class McvitError(Exception):
    """Base class for all package errors."""


class ShapeError(McvitError):
    """Tensor shapes incompatible with the requested operation."""


class ParameterError(McvitError):
    """A scalar argument is outside its valid range."""


class DegenerateInputError(McvitError):
    """Numerically degenerate input (zero norm, zero range, ...)."""


class ContractError(McvitError):
    """A caller violated an operation's preconditions."""


class ConfigurationError(McvitError):
    """Invalid model or run configuration."""


class NumericFailureError(McvitError):
    """NaN or non-finite value produced during computation."""


class FormatError(McvitError):
    """Malformed or missing on-disk artifact."""


class IntegrityError(McvitError):
    """On-disk artifact inconsistent with its manifest."""


class StateError(McvitError):
    """Operation requested in a state that does not support it."""
