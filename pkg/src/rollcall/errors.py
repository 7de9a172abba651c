"""Exception types shared across the platform."""


class RollcallError(Exception):
    """Base class for all domain and protocol errors."""


# -- roster / codes ---------------------------------------------------------

class InvalidGradeOrSection(RollcallError):
    """Grade, section, or enrollment year outside the supported ranges."""


class CapacityExhausted(RollcallError):
    """All 999 sequential numbers for a (year, grade, section) prefix are taken."""


class UnknownStudent(RollcallError):
    pass


# -- cards ------------------------------------------------------------------

class MalformedUid(RollcallError):
    """UID is not 8 hex characters (4 bytes)."""


class DuplicateUid(RollcallError):
    """UID is already active for a different student."""


class UnknownCard(RollcallError):
    pass


# -- attendance -------------------------------------------------------------

class NotAbsent(RollcallError):
    """Only an Absent record can be justified."""


class NonSchoolDay(RollcallError):
    pass


class ClosureTooEarly(RollcallError):
    """Closure requested before the policy's closure time on the target day."""


class FutureDate(RollcallError):
    pass


# -- authorization ----------------------------------------------------------

class Forbidden(RollcallError):
    pass


class AuthExpired(RollcallError):
    """Token missing, expired, or bound to a different principal."""


class RateLimited(RollcallError):
    pass


# -- storage ----------------------------------------------------------------

class UniquenessViolation(RollcallError):
    """A second current event for the same (student, school day)."""


class RegressionRejected(RollcallError):
    """Attempt to move the sync high-water mark backwards."""


class EdgeStoreUnavailable(RollcallError):
    """Durable append failed; the scan must be negatively acknowledged."""


# -- sync -------------------------------------------------------------------

class ChecksumMismatch(RollcallError):
    pass


class SequenceGap(RollcallError):
    """Batch does not start at central's high water + 1."""

    def __init__(self, message: str, central_high_water: int):
        super().__init__(message)
        self.central_high_water = central_high_water


# -- queries / reports ------------------------------------------------------

class InvalidRange(RollcallError):
    pass


class WindowTooShort(RollcallError):
    """Chronic-absenteeism window has fewer than the minimum closed school days."""


class CursorExpired(RollcallError):
    """Live-feed cursor is ahead of the feed; client must refetch a snapshot."""


class ConfigError(RollcallError):
    """Config file parse error; message carries file and line number."""
