"""Exception hierarchy shared across the package."""


class IluError(Exception):
    """Base class for all errors raised by ilulab."""


class ArgumentError(IluError, ValueError):
    """An argument violates an operation's precondition."""


class NumericError(IluError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(IluError):
    """A file does not conform to its declared binary or text format.

    ``offset`` is the byte offset (binary files) or 1-based line number
    (line-oriented files) where the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(FormatError):
    """A record parsed cleanly but violates a data invariant."""


class ReportError(IluError):
    """A report could not be rendered from a bundle."""


class ConfigError(IluError, ValueError):
    """An experiment configuration is malformed or inconsistent."""
