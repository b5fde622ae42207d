"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


class ContractError(ValueError):
    """Arguments violate an operation's contract (e.g. trace/variant mismatch)."""


class FormatError(ValueError):
    """A file does not follow its binary format.

    ``offset`` is the byte position at which the violation was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """A file declares a format version this code does not support."""
