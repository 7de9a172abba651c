"""Scan classification, daily uniqueness, and automatic closure.

All decisions are made against an injectable clock and a `TimeWindowPolicy`;
nothing here reads the wall clock.  Mutations are serialized through the
edge store's writer lock, so concurrent reader sessions cannot interleave
check-then-append sequences.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta, timezone
from enum import Enum
from zoneinfo import ZoneInfo

from . import config as cfgmod
from .clock import Clock
from .domain import (
    AttendanceEvent,
    AuditAction,
    AuditEntry,
    CardState,
    Method,
    Status,
    new_event_id,
    normalize_uid,
)
from .errors import ClosureTooEarly, Forbidden, MalformedUid, NonSchoolDay, NotAbsent

DEFAULT_PRESENT_START = time(7, 0, 0)
DEFAULT_LATE_START = time(8, 1, 0)
DEFAULT_CLOSURE = time(8, 31, 0)
DEFAULT_TIMEZONE = "America/Lima"
WEEKDAYS_MON_FRI = frozenset({0, 1, 2, 3, 4})


@dataclass(frozen=True)
class TimeWindowPolicy:
    present_start: time = DEFAULT_PRESENT_START
    late_start: time = DEFAULT_LATE_START
    closure: time = DEFAULT_CLOSURE
    tz_name: str = DEFAULT_TIMEZONE
    school_weekdays: frozenset = WEEKDAYS_MON_FRI
    holidays: frozenset = frozenset()

    def __post_init__(self):
        if not (self.present_start < self.late_start < self.closure):
            raise ValueError("policy must satisfy present_start < late_start < closure")
        ZoneInfo(self.tz_name)  # fail fast on unknown zones

    @property
    def tz(self) -> ZoneInfo:
        return ZoneInfo(self.tz_name)

    def is_school_day(self, day: date) -> bool:
        return day.weekday() in self.school_weekdays and day not in self.holidays

    def local(self, instant: datetime) -> datetime:
        return instant.astimezone(self.tz)

    def school_day_of(self, instant: datetime) -> date:
        return self.local(instant).date()

    def closure_instant(self, day: date) -> datetime:
        return datetime.combine(day, self.closure, tzinfo=self.tz).astimezone(timezone.utc)

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> "TimeWindowPolicy":
        return cls(
            present_start=cfgmod.get_time(cfg, "policy.present_start", DEFAULT_PRESENT_START),
            late_start=cfgmod.get_time(cfg, "policy.late_start", DEFAULT_LATE_START),
            closure=cfgmod.get_time(cfg, "policy.closure", DEFAULT_CLOSURE),
            tz_name=cfg.get("policy.timezone", DEFAULT_TIMEZONE),
            school_weekdays=cfgmod.get_weekdays(cfg, "policy.school_days", WEEKDAYS_MON_FRI),
            holidays=cfgmod.get_dates(cfg, "policy.holidays"),
        )

    def to_wire(self) -> dict:
        return {
            "present_start": self.present_start.isoformat(),
            "late_start": self.late_start.isoformat(),
            "closure": self.closure.isoformat(),
            "timezone": self.tz_name,
            "school_days": sorted(self.school_weekdays),
            "holidays": sorted(d.isoformat() for d in self.holidays),
        }

    @classmethod
    def from_wire(cls, data: dict) -> "TimeWindowPolicy":
        return cls(
            present_start=time.fromisoformat(data["present_start"]),
            late_start=time.fromisoformat(data["late_start"]),
            closure=time.fromisoformat(data["closure"]),
            tz_name=data["timezone"],
            school_weekdays=frozenset(data["school_days"]),
            holidays=frozenset(date.fromisoformat(d) for d in data["holidays"]),
        )


class Classification(Enum):
    PRESENT = "present"
    LATE = "late"
    BEFORE_WINDOW = "before_window"
    AFTER_CLOSURE = "after_closure"


def classify(policy: TimeWindowPolicy, t: time) -> Classification:
    """Total over the whole day; boundaries are half-open on the right."""
    if t < policy.present_start:
        return Classification.BEFORE_WINDOW
    if t < policy.late_start:
        return Classification.PRESENT
    if t < policy.closure:
        return Classification.LATE
    return Classification.AFTER_CLOSURE


class RejectReason(str, Enum):
    BEFORE_WINDOW = "before_window"
    AFTER_CLOSURE = "after_closure"
    CARD_BLOCKED = "card_blocked"
    UNKNOWN_CARD = "unknown_card"
    UNLINKED_CARD = "unlinked_card"
    NON_SCHOOL_DAY = "non_school_day"


class OutcomeKind(str, Enum):
    RECORDED = "recorded"
    DUPLICATE = "duplicate"
    REJECTED = "rejected"


@dataclass(frozen=True)
class ScanOutcome:
    kind: OutcomeKind
    status: Status | None = None
    reason: RejectReason | None = None

    @classmethod
    def recorded(cls, status: Status) -> "ScanOutcome":
        assert status in (Status.PRESENT, Status.LATE)
        return cls(OutcomeKind.RECORDED, status=status)

    @classmethod
    def duplicate(cls, status: Status) -> "ScanOutcome":
        return cls(OutcomeKind.DUPLICATE, status=status)

    @classmethod
    def rejected(cls, reason: RejectReason) -> "ScanOutcome":
        return cls(OutcomeKind.REJECTED, reason=reason)

    def describe(self) -> str:
        if self.kind is OutcomeKind.RECORDED:
            return f"recorded:{self.status.value}"
        if self.kind is OutcomeKind.DUPLICATE:
            return f"duplicate:{self.status.value}"
        return f"rejected:{self.reason.value}"


JUSTIFY_ROLES = frozenset({"admin", "auxiliary"})


class AttendanceEngine:
    """Single writer over the edge day ledger."""

    def __init__(self, store, policy: TimeWindowPolicy, clock: Clock):
        self.store = store
        self.clock = clock
        self._policy = policy
        self._policy_lock = threading.Lock()

    @property
    def policy(self) -> TimeWindowPolicy:
        with self._policy_lock:
            return self._policy

    def set_policy(self, policy: TimeWindowPolicy) -> None:
        with self._policy_lock:
            self._policy = policy

    # -- scans ----------------------------------------------------------------

    def process_scan(self, uid: str, now: datetime | None = None, node_id: str = "local") -> ScanOutcome:
        policy = self.policy
        actor = f"reader:{node_id}"

        with self.store.lock:
            # timestamp taken under the lock: ledger order == timestamp order
            now = now or self.clock.now()
            local = policy.local(now)
            day, t = local.date(), local.time()
            outcome, event = self._evaluate_scan(uid, policy, now, day, t)
            entry = AuditEntry(at=now, actor=actor, action=AuditAction.SCAN,
                               subject=uid, detail=outcome.describe())
            if event is not None:
                self.store.append_event(event, audit=entry)
            else:
                self.store.audit(entry)
            return outcome

    def _evaluate_scan(self, uid, policy, now, day, t):
        try:
            uid = normalize_uid(uid)
        except MalformedUid:
            return ScanOutcome.rejected(RejectReason.UNKNOWN_CARD), None
        card = self.store.get_card(uid)
        if card is None:
            return ScanOutcome.rejected(RejectReason.UNKNOWN_CARD), None
        if card.state is not CardState.ACTIVE:
            return ScanOutcome.rejected(RejectReason.CARD_BLOCKED), None
        if card.linked_student is None:
            return ScanOutcome.rejected(RejectReason.UNLINKED_CARD), None
        student = self.store.get_student(card.linked_student)
        if student is None or not student.active:
            # replica drift: card points at a missing or deactivated student
            return ScanOutcome.rejected(RejectReason.UNLINKED_CARD), None
        if not policy.is_school_day(day):
            return ScanOutcome.rejected(RejectReason.NON_SCHOOL_DAY), None
        cls = classify(policy, t)
        if cls is Classification.BEFORE_WINDOW:
            return ScanOutcome.rejected(RejectReason.BEFORE_WINDOW), None
        if cls is Classification.AFTER_CLOSURE:
            return ScanOutcome.rejected(RejectReason.AFTER_CLOSURE), None
        existing = self.store.current_event(student.student_code, day)
        if existing is not None:
            return ScanOutcome.duplicate(existing.status), None
        status = Status.PRESENT if cls is Classification.PRESENT else Status.LATE
        event = AttendanceEvent(
            event_id=new_event_id(),
            version=1,
            student_code=student.student_code,
            school_day=day,
            status=status,
            recorded_at=now,
            method=Method.RFID,
        )
        return ScanOutcome.recorded(status), event

    # -- closure ----------------------------------------------------------------

    def run_closure(self, day: date | None = None) -> list[AttendanceEvent]:
        policy = self.policy
        now_local = policy.local(self.clock.now())
        day = day or now_local.date()
        if not policy.is_school_day(day):
            raise NonSchoolDay(f"{day.isoformat()} is not a school day")
        if day > now_local.date() or (day == now_local.date() and now_local.time() < policy.closure):
            raise ClosureTooEarly(f"closure for {day.isoformat()} runs at {policy.closure}")
        closure_at = policy.closure_instant(day)
        with self.store.lock:
            if self.store.closure_ran(day):
                return []
            created = []
            for code in self.store.active_student_codes():
                if self.store.current_event(code, day) is None:
                    created.append(AttendanceEvent(
                        event_id=new_event_id(),
                        version=1,
                        student_code=code,
                        school_day=day,
                        status=Status.ABSENT,
                        recorded_at=closure_at,
                        method=Method.SYSTEM_CLOSURE,
                    ))
            self.store.close_day(day, created)
            return created

    def closure_backlog(self) -> list[date]:
        """School days whose closure is due but has not run (missed while off)."""
        policy = self.policy
        now_local = policy.local(self.clock.now())
        start = self.store.first_seen_day()
        if start is None:
            return []
        days = []
        d = start
        while d <= now_local.date():
            if policy.is_school_day(d) and not self.store.closure_ran(d):
                if d < now_local.date() or now_local.time() >= policy.closure:
                    days.append(d)
            d += timedelta(days=1)
        return days

    def next_closure_instant(self) -> datetime:
        policy = self.policy
        now_local = policy.local(self.clock.now())
        d = now_local.date()
        while True:
            if policy.is_school_day(d) and not self.store.closure_ran(d):
                instant = policy.closure_instant(d)
                if instant > self.clock.now():
                    return instant
            d += timedelta(days=1)

    # -- justification ------------------------------------------------------------

    def justify(self, student_code: str, day: date, actor: str, actor_role: str, note: str = "") -> AttendanceEvent:
        if actor_role.lower() not in JUSTIFY_ROLES:
            raise Forbidden(f"role {actor_role!r} cannot justify absences")
        with self.store.lock:
            existing = self.store.current_event(student_code, day)
            if existing is None or existing.status is not Status.ABSENT:
                raise NotAbsent(f"no absent record for {student_code} on {day.isoformat()}")
            updated = AttendanceEvent(
                event_id=existing.event_id,
                version=existing.version + 1,
                student_code=student_code,
                school_day=day,
                status=Status.JUSTIFIED,
                recorded_at=existing.recorded_at,
                method=Method.MANUAL,
                recorded_by=actor,
            )
            entry = AuditEntry(
                at=self.clock.now(), actor=actor, action=AuditAction.JUSTIFY,
                subject=f"{student_code}:{day.isoformat()}",
                detail=f"was={existing.status.value}/{existing.method.value}"
                       f"@{existing.recorded_at.isoformat()} note={note}",
            )
            self.store.append_event(updated, supersede=True, audit=entry)
            return updated
