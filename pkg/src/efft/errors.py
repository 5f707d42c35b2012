"""Exception types raised across the package."""


class EfftError(Exception):
    """Base class for all package errors."""


class ShapeError(EfftError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(EfftError, ValueError):
    """Invalid model, method or experiment configuration."""


class ContractError(EfftError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(EfftError, ArithmeticError):
    """Non-finite values or divergence."""


class FormatError(EfftError, ValueError):
    """Malformed binary or text input (IDX files, checkpoints, configs)."""
