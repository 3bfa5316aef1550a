"""Exception types shared across the package.

Each class maps onto one CLI exit code (see ``retinexformer.cli``).
"""


class RetinexformerError(Exception):
    exit_code = 1


class ShapeError(RetinexformerError, ValueError):
    exit_code = 2


class ConfigError(RetinexformerError, ValueError):
    exit_code = 2


class UsageError(RetinexformerError, RuntimeError):
    exit_code = 2


class FormatError(RetinexformerError, IOError):
    """Malformed or truncated file; ``offset`` is the failing byte position."""

    exit_code = 4

    def __init__(self, message, offset=None, field=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
        self.field = field


class NumericError(RetinexformerError, ArithmeticError):
    exit_code = 5
