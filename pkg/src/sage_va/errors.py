"""Exception hierarchy shared across the package."""


class SageError(Exception):
    """Base class for all errors raised by sage_va."""


class DimensionError(SageError, ValueError):
    pass


class ConfigError(SageError, ValueError):
    pass


class DomainError(SageError, ValueError):
    pass


class ContractError(SageError, ValueError):
    pass


class FormatError(SageError, ValueError):
    """A binary file could not be parsed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class DataError(SageError, ValueError):
    """Annotation content violates its value constraints."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class AlignmentError(SageError, ValueError):
    pass


class EvaluationError(SageError, ValueError):
    pass


class BatchError(SageError, ValueError):
    """A training batch cannot produce a useful loss (e.g. fewer than two valid frames)."""


class NumericError(SageError, RuntimeError):
    pass
