"""Core domain types shared by the edge node and the central service.

Covers roster identities with auto-generated student codes, the RFID card
lifecycle, attendance events with their status/method constraints, and the
append-only audit vocabulary.
"""

from __future__ import annotations

import re
import secrets
import string
from dataclasses import dataclass, replace
from datetime import date, datetime, timezone
from enum import Enum
from typing import Iterable, Mapping

from .errors import (
    CapacityExhausted,
    DuplicateUid,
    InvalidGradeOrSection,
    MalformedUid,
    UnknownStudent,
)

STUDENT_CODE_RE = re.compile(r"^[0-9]{4}-[1-5][A-Z]-[0-9]{3}$")
UID_RE = re.compile(r"^[0-9A-F]{8}$")

SECTIONS = string.ascii_uppercase


class Status(str, Enum):
    PRESENT = "present"
    LATE = "late"
    ABSENT = "absent"
    JUSTIFIED = "justified"


class Method(str, Enum):
    RFID = "rfid"
    MANUAL = "manual"
    SYSTEM_CLOSURE = "system_closure"


class CardState(str, Enum):
    ACTIVE = "active"
    BLOCKED = "blocked"


class AuditAction(str, Enum):
    SCAN = "scan"
    ENROLL = "enroll"
    BLOCK = "block"
    UNBLOCK = "unblock"
    MANUAL_MARK = "manual_mark"
    JUSTIFY = "justify"
    SYNC_PUSH = "sync_push"
    LOGIN_FAIL = "login_fail"
    # authorization denials must be audited; not part of the original action
    # vocabulary but required by the deny-by-default contract
    DENY = "deny"


def to_rfc3339(dt: datetime) -> str:
    """UTC, fixed microsecond precision; the canonical timestamp encoding."""
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_rfc3339(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {text!r} is not timezone-aware")
    return dt.astimezone(timezone.utc)


def new_event_id() -> str:
    """128-bit random identifier, 32 hex chars."""
    return secrets.token_hex(16)


def normalize_uid(raw: str) -> str:
    """Canonical UID form: 8 uppercase hex chars, MSB first, no separators."""
    cleaned = raw.strip().replace(":", "").replace(" ", "").upper()
    if not UID_RE.match(cleaned):
        raise MalformedUid(f"uid {raw!r} is not a 4-byte hex identifier")
    return cleaned


@dataclass(frozen=True)
class StudentRecord:
    student_code: str
    given_names: str
    family_names: str
    enrollment_year: int
    grade: int
    section: str
    emergency_contact: str = ""
    active: bool = True

    def __post_init__(self):
        if not STUDENT_CODE_RE.match(self.student_code):
            raise InvalidGradeOrSection(f"bad student code {self.student_code!r}")
        year, gs, _ = self.student_code.split("-")
        if int(year) != self.enrollment_year or int(gs[0]) != self.grade or gs[1] != self.section:
            raise InvalidGradeOrSection(
                f"code {self.student_code!r} disagrees with "
                f"({self.enrollment_year}, {self.grade}, {self.section!r})"
            )


@dataclass(frozen=True)
class RfidCard:
    uid: str
    state: CardState
    linked_student: str | None
    issued_at: datetime

    def __post_init__(self):
        if not UID_RE.match(self.uid):
            raise MalformedUid(f"uid {self.uid!r} is not canonical 8-hex")


@dataclass(frozen=True)
class AttendanceEvent:
    """One attendance record version.

    `event_id` identifies the logical (student, school day) record; a status
    transition (justification, manual supersede) appends a new version with
    the same event_id rather than editing in place.
    """

    event_id: str
    version: int
    student_code: str
    school_day: date
    status: Status
    recorded_at: datetime
    method: Method
    recorded_by: str | None = None
    edge_sequence: int | None = None

    def __post_init__(self):
        if self.method is Method.RFID and self.status not in (Status.PRESENT, Status.LATE):
            raise ValueError(f"rfid event cannot have status {self.status.value}")
        if self.method is Method.SYSTEM_CLOSURE and self.status is not Status.ABSENT:
            raise ValueError("system closure events are always absent")
        if self.status is Status.JUSTIFIED and self.method is not Method.MANUAL:
            raise ValueError("justified status requires manual method")
        if self.method is Method.MANUAL and not self.recorded_by:
            raise ValueError("manual events must carry recorded_by")
        if self.version < 1:
            raise ValueError("version starts at 1")
        if self.recorded_at.tzinfo is None:
            raise ValueError("recorded_at must be timezone-aware")


@dataclass(frozen=True)
class AuditEntry:
    at: datetime
    actor: str
    action: AuditAction
    subject: str
    detail: str = ""


def prefer_event(a: AttendanceEvent, b: AttendanceEvent) -> AttendanceEvent:
    """Pick the surviving record when two versions claim the same (student, day).

    Same lineage: the higher version supersedes.  Different lineages (e.g.
    a scan recorded at the edge vs a manual mark at central during a
    partition): the earliest recorded_at wins, with the event id as a
    deterministic tie-break.  Both sides apply this rule, so edge and
    central converge.
    """
    if a.event_id == b.event_id:
        return a if a.version >= b.version else b
    if (a.recorded_at, a.event_id) <= (b.recorded_at, b.event_id):
        return a
    return b


# -- student code generation --------------------------------------------------

def code_prefix(enrollment_year: int, grade: int, section: str) -> str:
    if not (1000 <= enrollment_year <= 9999):
        raise InvalidGradeOrSection(f"enrollment year {enrollment_year} out of range")
    if grade not in (1, 2, 3, 4, 5):
        raise InvalidGradeOrSection(f"grade {grade} not in 1-5")
    if len(section) != 1 or section not in SECTIONS:
        raise InvalidGradeOrSection(f"section {section!r} not a single letter A-Z")
    return f"{enrollment_year:04d}-{grade}{section}-"


def generate_student_code(
    enrollment_year: int, grade: int, section: str, roster: Iterable[str]
) -> str:
    """Smallest free NNN >= 001 for the (year, grade, section) prefix."""
    prefix = code_prefix(enrollment_year, grade, section)
    used = set()
    for code in roster:
        if code.startswith(prefix):
            used.add(int(code[len(prefix):]))
    for n in range(1, 1000):
        if n not in used:
            return f"{prefix}{n:03d}"
    raise CapacityExhausted(f"no free sequential number under prefix {prefix!r}")


# -- card lifecycle ------------------------------------------------------------

def plan_enrollment(
    uid: str,
    student_code: str,
    cards: Mapping[str, RfidCard],
    students: Mapping[str, StudentRecord],
    now: datetime,
) -> list[RfidCard]:
    """Card rows to upsert so that `uid` becomes the student's single active card.

    Re-enrolling the same uid to the same student is an idempotent no-op
    (returns the existing row only).  Any other active card of the student is
    blocked, never deleted, preserving its audit trail.
    """
    uid = normalize_uid(uid)
    student = students.get(student_code)
    if student is None or not student.active:
        raise UnknownStudent(f"no active student {student_code!r}")
    existing = cards.get(uid)
    if existing is not None and existing.linked_student not in (None, student_code):
        if existing.state is CardState.ACTIVE:
            raise DuplicateUid(
                f"uid {uid} is active for student {existing.linked_student}"
            )
    changes: list[RfidCard] = []
    for card in cards.values():
        if (
            card.linked_student == student_code
            and card.state is CardState.ACTIVE
            and card.uid != uid
        ):
            changes.append(replace(card, state=CardState.BLOCKED))
    if existing is not None and existing.linked_student == student_code and existing.state is CardState.ACTIVE:
        changes.append(existing)
    else:
        changes.append(RfidCard(uid=uid, state=CardState.ACTIVE, linked_student=student_code, issued_at=now))
    return changes
