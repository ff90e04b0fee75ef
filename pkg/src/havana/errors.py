"""Exception hierarchy shared by every module."""


class HavanaError(Exception):
    """Base class for all package errors."""


class ArgumentError(HavanaError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ArgumentError):
    """Inconsistent configuration (bad shapes, invalid tunables)."""


class DataError(HavanaError):
    """Input data cannot be used (empty blocks, missing labels, ...)."""


class ParseError(DataError):
    """A text file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DataError):
    """A file does not follow its declared format."""


class UnsupportedVersionError(FormatError):
    """A file declares a format version this build cannot read."""


class EmptyBlockError(DataError):
    """A spherical query selected no points."""


class NumericError(HavanaError, ArithmeticError):
    """Non-finite values reached a computation that requires finite input."""


class ContractError(HavanaError, RuntimeError):
    """An internal contract was broken (stale cache, shape mismatch...)."""
