"""Attendance statistics, chronic-absenteeism flagging, and CSV export.

Pure read-side computations over event snapshots.  A school day counts as
closed when every active student has a record for it (which is exactly the
conservation invariant the closure job establishes); summaries over periods
with unclosed days are marked provisional instead of failing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Iterable, Mapping

from .domain import AttendanceEvent, Status, to_rfc3339
from .engine import TimeWindowPolicy
from .errors import InvalidRange, WindowTooShort

DEFAULT_CHRONIC_THRESHOLD = 0.10
MIN_CHRONIC_WINDOW_DAYS = 10

EVENT_CSV_COLUMNS = ["school_day", "student_code", "status", "method",
                     "recorded_at", "recorded_by", "event_id"]

SUMMARY_CSV_COLUMNS = ["scope", "period_start", "period_end", "school_days",
                       "roster_size", "present", "late", "absent", "justified",
                       "attendance_rate", "tardiness_rate", "provisional"]


def school_days_between(policy: TimeWindowPolicy, start: date, end: date) -> list[date]:
    if start > end:
        raise InvalidRange(f"{start} after {end}")
    days = []
    d = start
    while d <= end:
        if policy.is_school_day(d):
            days.append(d)
        d += timedelta(days=1)
    return days


def resolve_period(kind: str, anchor: date | None = None,
                   start: date | None = None, end: date | None = None) -> tuple[date, date]:
    """day/week/month periods around an anchor date, or an explicit range."""
    if kind == "range":
        if start is None or end is None:
            raise InvalidRange("range period needs explicit start and end")
        if start > end:
            raise InvalidRange(f"{start} after {end}")
        return start, end
    if anchor is None:
        raise InvalidRange(f"period {kind!r} needs an anchor date")
    if kind == "day":
        return anchor, anchor
    if kind == "week":
        monday = anchor - timedelta(days=anchor.weekday())
        return monday, monday + timedelta(days=6)
    if kind == "month":
        first = anchor.replace(day=1)
        next_first = (first + timedelta(days=32)).replace(day=1)
        return first, next_first - timedelta(days=1)
    raise InvalidRange(f"unknown period kind {kind!r}")


@dataclass(frozen=True)
class AttendanceSummary:
    scope: str
    period_start: date
    period_end: date
    school_days: int
    roster_size: int
    counts: dict
    attendance_rate: float
    tardiness_rate: float
    provisional: bool

    def to_wire(self) -> dict:
        return {
            "scope": self.scope,
            "period_start": self.period_start.isoformat(),
            "period_end": self.period_end.isoformat(),
            "school_days": self.school_days,
            "roster_size": self.roster_size,
            "counts": dict(self.counts),
            "attendance_rate": self.attendance_rate,
            "tardiness_rate": self.tardiness_rate,
            "provisional": self.provisional,
        }


def summarize(scope: str, events: Iterable[AttendanceEvent], roster_size: int,
              school_days: list[date], closed_days: set[date]) -> AttendanceSummary:
    day_set = set(school_days)
    counts = {s.value: 0 for s in Status}
    for ev in events:
        if ev.school_day in day_set:
            counts[ev.status.value] += 1
    attended = counts[Status.PRESENT.value] + counts[Status.LATE.value]
    slots = roster_size * len(school_days)
    return AttendanceSummary(
        scope=scope,
        period_start=min(school_days) if school_days else date.min,
        period_end=max(school_days) if school_days else date.min,
        school_days=len(school_days),
        roster_size=roster_size,
        counts=counts,
        attendance_rate=attended / slots if slots else 0.0,
        tardiness_rate=counts[Status.LATE.value] / attended if attended else 0.0,
        provisional=any(d not in closed_days for d in school_days),
    )


def flag_chronic_absenteeism(statuses_by_day: Mapping[date, Status],
                             closed_school_days: list[date],
                             threshold: float = DEFAULT_CHRONIC_THRESHOLD
                             ) -> tuple[bool, list[date]]:
    """Unjustified absences over closed school days; justified days never count."""
    if len(closed_school_days) < MIN_CHRONIC_WINDOW_DAYS:
        raise WindowTooShort(
            f"need >= {MIN_CHRONIC_WINDOW_DAYS} closed school days, "
            f"got {len(closed_school_days)}")
    evidence = [d for d in closed_school_days
                if statuses_by_day.get(d) is Status.ABSENT]
    flagged = len(evidence) / len(closed_school_days) >= threshold
    return flagged, evidence


# -- CSV ------------------------------------------------------------------------

def events_to_csv(events: Iterable[AttendanceEvent]) -> str:
    """RFC-4180 text (CRLF line endings), header row, stable column order."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\r\n")
    writer.writerow(EVENT_CSV_COLUMNS)
    for ev in events:
        writer.writerow([
            ev.school_day.isoformat(),
            ev.student_code,
            ev.status.value,
            ev.method.value,
            to_rfc3339(ev.recorded_at),
            ev.recorded_by or "",
            ev.event_id,
        ])
    return out.getvalue()


def summaries_to_csv(summaries: Iterable[AttendanceSummary]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\r\n")
    writer.writerow(SUMMARY_CSV_COLUMNS)
    for s in summaries:
        writer.writerow([
            s.scope, s.period_start.isoformat(), s.period_end.isoformat(),
            s.school_days, s.roster_size,
            s.counts[Status.PRESENT.value], s.counts[Status.LATE.value],
            s.counts[Status.ABSENT.value], s.counts[Status.JUSTIFIED.value],
            f"{s.attendance_rate:.6f}", f"{s.tardiness_rate:.6f}",
            str(s.provisional).lower(),
        ])
    return out.getvalue()
