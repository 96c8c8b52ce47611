class AlignTIError(Exception):
    """Base class for all package errors."""


class ContractError(AlignTIError, ValueError):
    """A caller violated an operation's preconditions."""


class NumericDomainError(AlignTIError, ArithmeticError):
    """NaN or infinite values appeared where finite ones are required."""


class DegenerateInputError(AlignTIError, ValueError):
    """Input is well-formed but carries no usable signal (e.g. empty segments)."""


class ConfigError(AlignTIError, ValueError):
    """A configuration cannot be satisfied."""
