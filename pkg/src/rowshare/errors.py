from enum import Enum


class RowshareError(Exception):
    pass


class ErrorCode(str, Enum):
    """Closed set of service error codes carried on the wire."""

    AUTH_FAILED = "AUTH_FAILED"
    NOT_FOUND = "NOT_FOUND"
    AFFIRMATIVELY_ABSENT = "AFFIRMATIVELY_ABSENT"
    SIGNATURE_INVALID = "SIGNATURE_INVALID"
    METHOD_UNKNOWN = "METHOD_UNKNOWN"
    SCHEMA_ERROR = "SCHEMA_ERROR"
    FRAME_TOO_LARGE = "FRAME_TOO_LARGE"
    INTERNAL = "INTERNAL"


class ServiceError(RowshareError):
    """Structured error answered by the synchronizer."""

    def __init__(self, code: ErrorCode, message: str = ""):
        self.code = ErrorCode(code)
        self.message = message
        super().__init__(f"{self.code.value}: {message}" if message else self.code.value)


class TransportError(RowshareError, ConnectionError):
    """The synchronizer could not be reached or the connection broke mid-call."""


class SchemaError(RowshareError, ValueError):
    pass


class DuplicateTableError(SchemaError):
    pass


class UnknownTableError(SchemaError):
    pass


class OwnershipConflict(RowshareError):
    """A shared row and an owned row claim the same primary key."""


class JournalParseError(RowshareError, ValueError):
    pass


class KeyUnavailableError(RowshareError):
    """No row key could be obtained for a shared row that must be re-encrypted."""
