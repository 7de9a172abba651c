"""Durable local persistence for the edge node.

One SQLite file holds the roster/card replica, the append-only event log
with gapless monotone sequence numbers, the remote read-model (events that
originated at central), the audit trail, and sync bookkeeping.  WAL mode
with synchronous=NORMAL: every commit reaches the OS before a scan is
acknowledged, so no acknowledged scan is lost to a process kill.  (Power
loss durability would additionally need synchronous=FULL.)
"""

from __future__ import annotations

import json
import sqlite3
import threading
from datetime import date, datetime

from .domain import (
    AttendanceEvent,
    AuditAction,
    AuditEntry,
    CardState,
    Method,
    RfidCard,
    Status,
    StudentRecord,
    parse_rfc3339,
    prefer_event,
    to_rfc3339,
)
from .errors import EdgeStoreUnavailable, RegressionRejected, UniquenessViolation
from .syncproto import RosterDelta, SyncBatch

_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta(
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS students(
    student_code TEXT PRIMARY KEY,
    given_names TEXT NOT NULL,
    family_names TEXT NOT NULL,
    enrollment_year INTEGER NOT NULL,
    grade INTEGER NOT NULL,
    section TEXT NOT NULL,
    emergency_contact TEXT NOT NULL DEFAULT '',
    active INTEGER NOT NULL DEFAULT 1
);
CREATE TABLE IF NOT EXISTS cards(
    uid TEXT PRIMARY KEY,
    state TEXT NOT NULL,
    linked_student TEXT,
    issued_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS event_log(
    edge_sequence INTEGER PRIMARY KEY,
    event_id TEXT NOT NULL,
    version INTEGER NOT NULL,
    student_code TEXT NOT NULL,
    school_day TEXT NOT NULL,
    status TEXT NOT NULL,
    recorded_at TEXT NOT NULL,
    method TEXT NOT NULL,
    recorded_by TEXT
);
CREATE INDEX IF NOT EXISTS idx_log_student_day ON event_log(student_code, school_day);
CREATE TABLE IF NOT EXISTS remote_events(
    event_id TEXT PRIMARY KEY,
    version INTEGER NOT NULL,
    student_code TEXT NOT NULL,
    school_day TEXT NOT NULL,
    status TEXT NOT NULL,
    recorded_at TEXT NOT NULL,
    method TEXT NOT NULL,
    recorded_by TEXT
);
CREATE INDEX IF NOT EXISTS idx_remote_student_day ON remote_events(student_code, school_day);
CREATE TABLE IF NOT EXISTS audit(
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    at TEXT NOT NULL,
    actor TEXT NOT NULL,
    action TEXT NOT NULL,
    subject TEXT NOT NULL,
    detail TEXT NOT NULL DEFAULT ''
);
"""

_EVENT_COLS = "edge_sequence, event_id, version, student_code, school_day, status, recorded_at, method, recorded_by"


def _row_to_event(row) -> AttendanceEvent:
    return AttendanceEvent(
        edge_sequence=row[0],
        event_id=row[1],
        version=row[2],
        student_code=row[3],
        school_day=date.fromisoformat(row[4]),
        status=Status(row[5]),
        recorded_at=parse_rfc3339(row[6]),
        method=Method(row[7]),
        recorded_by=row[8],
    )


class EdgeStore:
    """Single-writer store; every mutation holds `lock` and commits before returning."""

    def __init__(self, path: str, node_id: str = "edge"):
        self.path = path
        self.node_id = node_id
        self.lock = threading.RLock()
        self._conn = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA synchronous=NORMAL")
        self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        with self.lock:
            self._conn.close()

    # -- transactions ----------------------------------------------------------

    def _begin(self):
        self._conn.execute("BEGIN IMMEDIATE")

    def _commit(self):
        self._conn.execute("COMMIT")

    def _rollback(self):
        try:
            self._conn.execute("ROLLBACK")
        except sqlite3.Error:
            pass

    # -- meta -------------------------------------------------------------------

    def _get_meta(self, key: str) -> str | None:
        row = self._conn.execute("SELECT value FROM meta WHERE key=?", (key,)).fetchone()
        return row[0] if row else None

    def _set_meta(self, key: str, value: str) -> None:
        self._conn.execute(
            "INSERT INTO meta(key, value) VALUES(?, ?) "
            "ON CONFLICT(key) DO UPDATE SET value=excluded.value",
            (key, value),
        )

    def first_seen_day(self) -> date | None:
        with self.lock:
            raw = self._get_meta("first_seen_day")
            return date.fromisoformat(raw) if raw else None

    def ensure_first_seen(self, day: date) -> None:
        with self.lock:
            if self._get_meta("first_seen_day") is None:
                self._begin()
                self._set_meta("first_seen_day", day.isoformat())
                self._commit()

    # -- roster replica -----------------------------------------------------------

    def upsert_student(self, s: StudentRecord) -> None:
        with self.lock:
            self._begin()
            self._conn.execute(
                "INSERT INTO students VALUES(?,?,?,?,?,?,?,?) "
                "ON CONFLICT(student_code) DO UPDATE SET given_names=excluded.given_names, "
                "family_names=excluded.family_names, enrollment_year=excluded.enrollment_year, "
                "grade=excluded.grade, section=excluded.section, "
                "emergency_contact=excluded.emergency_contact, active=excluded.active",
                (s.student_code, s.given_names, s.family_names, s.enrollment_year,
                 s.grade, s.section, s.emergency_contact, int(s.active)),
            )
            self._commit()

    def get_student(self, code: str) -> StudentRecord | None:
        with self.lock:
            row = self._conn.execute(
                "SELECT student_code, given_names, family_names, enrollment_year, grade, "
                "section, emergency_contact, active FROM students WHERE student_code=?",
                (code,),
            ).fetchone()
        if row is None:
            return None
        return StudentRecord(
            student_code=row[0], given_names=row[1], family_names=row[2],
            enrollment_year=row[3], grade=row[4], section=row[5],
            emergency_contact=row[6], active=bool(row[7]),
        )

    def active_student_codes(self) -> list[str]:
        with self.lock:
            rows = self._conn.execute(
                "SELECT student_code FROM students WHERE active=1 ORDER BY student_code"
            ).fetchall()
        return [r[0] for r in rows]

    def upsert_card(self, c: RfidCard) -> None:
        with self.lock:
            self._begin()
            self._conn.execute(
                "INSERT INTO cards VALUES(?,?,?,?) "
                "ON CONFLICT(uid) DO UPDATE SET state=excluded.state, "
                "linked_student=excluded.linked_student, issued_at=excluded.issued_at",
                (c.uid, c.state.value, c.linked_student, to_rfc3339(c.issued_at)),
            )
            self._commit()

    def get_card(self, uid: str) -> RfidCard | None:
        with self.lock:
            row = self._conn.execute(
                "SELECT uid, state, linked_student, issued_at FROM cards WHERE uid=?", (uid,)
            ).fetchone()
        if row is None:
            return None
        return RfidCard(uid=row[0], state=CardState(row[1]), linked_student=row[2],
                        issued_at=parse_rfc3339(row[3]))

    def roster_version(self) -> int:
        with self.lock:
            return int(self._get_meta("roster_version") or 0)

    def apply_roster_delta(self, delta: RosterDelta) -> None:
        with self.lock:
            self._begin()
            try:
                for s in delta.students:
                    self._conn.execute(
                        "INSERT INTO students VALUES(?,?,?,?,?,?,?,?) "
                        "ON CONFLICT(student_code) DO UPDATE SET given_names=excluded.given_names, "
                        "family_names=excluded.family_names, enrollment_year=excluded.enrollment_year, "
                        "grade=excluded.grade, section=excluded.section, "
                        "emergency_contact=excluded.emergency_contact, active=excluded.active",
                        (s.student_code, s.given_names, s.family_names, s.enrollment_year,
                         s.grade, s.section, s.emergency_contact, int(s.active)),
                    )
                for c in delta.cards:
                    self._conn.execute(
                        "INSERT INTO cards VALUES(?,?,?,?) "
                        "ON CONFLICT(uid) DO UPDATE SET state=excluded.state, "
                        "linked_student=excluded.linked_student, issued_at=excluded.issued_at",
                        (c.uid, c.state.value, c.linked_student, to_rfc3339(c.issued_at)),
                    )
                for ev in delta.events:
                    self._upsert_remote(ev)
                self._set_meta("roster_version", str(delta.version))
                self._commit()
            except BaseException:
                self._rollback()
                raise

    # -- remote read-model -----------------------------------------------------------

    def _upsert_remote(self, ev: AttendanceEvent) -> None:
        self._conn.execute(
            "INSERT INTO remote_events VALUES(?,?,?,?,?,?,?,?) "
            "ON CONFLICT(event_id) DO UPDATE SET version=excluded.version, "
            "student_code=excluded.student_code, school_day=excluded.school_day, "
            "status=excluded.status, recorded_at=excluded.recorded_at, "
            "method=excluded.method, recorded_by=excluded.recorded_by "
            "WHERE excluded.version >= remote_events.version",
            (ev.event_id, ev.version, ev.student_code, ev.school_day.isoformat(),
             ev.status.value, to_rfc3339(ev.recorded_at), ev.method.value, ev.recorded_by),
        )

    def upsert_remote_event(self, ev: AttendanceEvent) -> None:
        with self.lock:
            self._begin()
            self._upsert_remote(ev)
            self._commit()

    # -- event log ----------------------------------------------------------------------

    def max_sequence(self) -> int:
        with self.lock:
            row = self._conn.execute("SELECT COALESCE(MAX(edge_sequence), 0) FROM event_log").fetchone()
        return row[0]

    def _local_current(self, student_code: str, day: date) -> AttendanceEvent | None:
        row = self._conn.execute(
            f"SELECT {_EVENT_COLS} FROM event_log WHERE student_code=? AND school_day=? "
            "ORDER BY edge_sequence DESC LIMIT 1",
            (student_code, day.isoformat()),
        ).fetchone()
        return _row_to_event(row) if row else None

    def _remote_current(self, student_code: str, day: date) -> AttendanceEvent | None:
        row = self._conn.execute(
            "SELECT NULL, event_id, version, student_code, school_day, status, recorded_at, "
            "method, recorded_by FROM remote_events WHERE student_code=? AND school_day=? "
            "ORDER BY recorded_at, event_id LIMIT 1",
            (student_code, day.isoformat()),
        ).fetchone()
        return _row_to_event(row) if row else None

    def current_event(self, student_code: str, day: date) -> AttendanceEvent | None:
        """Effective record for (student, day): local log merged with the read-model."""
        with self.lock:
            local = self._local_current(student_code, day)
            remote = self._remote_current(student_code, day)
        if local is None:
            return remote
        if remote is None:
            return local
        return prefer_event(local, remote)

    def append_event(self, event: AttendanceEvent, supersede: bool = False,
                     audit: AuditEntry | None = None) -> int:
        """Durable append; returns the assigned gapless sequence number."""
        with self.lock:
            try:
                self._begin()
                current = self.current_event(event.student_code, event.school_day)
                if supersede:
                    if current is None or current.event_id != event.event_id \
                            or event.version != current.version + 1:
                        self._rollback()
                        raise UniquenessViolation(
                            f"supersede of {event.event_id} v{event.version} does not follow current"
                        )
                elif current is not None:
                    self._rollback()
                    raise UniquenessViolation(
                        f"{event.student_code} already has a record for {event.school_day}"
                    )
                seq = self._append_row(event)
                if audit is not None:
                    self._audit_row(audit)
                self._commit()
                return seq
            except UniquenessViolation:
                raise
            except sqlite3.Error as exc:
                self._rollback()
                raise EdgeStoreUnavailable(str(exc)) from exc

    def _append_row(self, event: AttendanceEvent) -> int:
        seq = self._conn.execute(
            "SELECT COALESCE(MAX(edge_sequence), 0) + 1 FROM event_log"
        ).fetchone()[0]
        self._conn.execute(
            "INSERT INTO event_log VALUES(?,?,?,?,?,?,?,?,?)",
            (seq, event.event_id, event.version, event.student_code,
             event.school_day.isoformat(), event.status.value,
             to_rfc3339(event.recorded_at), event.method.value, event.recorded_by),
        )
        return seq

    def close_day(self, day: date, events: list[AttendanceEvent]) -> list[int]:
        """Atomically append closure events and latch the per-day closure flag."""
        with self.lock:
            try:
                self._begin()
                seqs = [self._append_row(ev) for ev in events]
                self._set_meta(f"closure_ran:{day.isoformat()}", "1")
                self._commit()
                return seqs
            except sqlite3.Error as exc:
                self._rollback()
                raise EdgeStoreUnavailable(str(exc)) from exc

    def closure_ran(self, day: date) -> bool:
        with self.lock:
            return self._get_meta(f"closure_ran:{day.isoformat()}") == "1"

    def events_for_day(self, day: date) -> dict[str, AttendanceEvent]:
        """Current (effective) event per student for the day."""
        with self.lock:
            rows = self._conn.execute(
                f"SELECT {_EVENT_COLS} FROM event_log WHERE school_day=? ORDER BY edge_sequence",
                (day.isoformat(),),
            ).fetchall()
            remote_rows = self._conn.execute(
                "SELECT NULL, event_id, version, student_code, school_day, status, recorded_at, "
                "method, recorded_by FROM remote_events WHERE school_day=?",
                (day.isoformat(),),
            ).fetchall()
        current: dict[str, AttendanceEvent] = {}
        for row in rows + remote_rows:
            ev = _row_to_event(row)
            held = current.get(ev.student_code)
            current[ev.student_code] = ev if held is None else prefer_event(held, ev)
        return current

    def read_log(self, from_sequence: int, max_n: int) -> list[AttendanceEvent]:
        with self.lock:
            rows = self._conn.execute(
                f"SELECT {_EVENT_COLS} FROM event_log WHERE edge_sequence >= ? "
                "ORDER BY edge_sequence LIMIT ?",
                (from_sequence, max_n),
            ).fetchall()
        return [_row_to_event(r) for r in rows]

    def iter_log(self) -> list[AttendanceEvent]:
        return self.read_log(1, 2 ** 62)

    # -- sync bookkeeping ------------------------------------------------------------------

    def high_water_synced(self) -> int:
        with self.lock:
            return int(self._get_meta("high_water_synced") or 0)

    def mark_synced(self, ack_high_water: int) -> None:
        with self.lock:
            current = self.high_water_synced()
            if ack_high_water < current:
                raise RegressionRejected(
                    f"high water {ack_high_water} below current {current}"
                )
            if ack_high_water == current:
                return
            if ack_high_water > self.max_sequence():
                raise ValueError("high water beyond the log end")
            self._begin()
            self._set_meta("high_water_synced", str(ack_high_water))
            self._commit()

    def pending_batch(self, max_n: int) -> SyncBatch | None:
        """Next unacknowledged run of events, oldest first; None when caught up."""
        if max_n < 1:
            raise ValueError("max_n must be >= 1")
        with self.lock:
            events = self.read_log(self.high_water_synced() + 1, max_n)
        if not events:
            return None
        return SyncBatch.build(self.node_id, events)

    # -- audit ------------------------------------------------------------------------------

    def _audit_row(self, entry: AuditEntry) -> None:
        self._conn.execute(
            "INSERT INTO audit(at, actor, action, subject, detail) VALUES(?,?,?,?,?)",
            (to_rfc3339(entry.at), entry.actor, entry.action.value, entry.subject, entry.detail),
        )

    def audit(self, entry: AuditEntry) -> None:
        with self.lock:
            self._begin()
            self._audit_row(entry)
            self._commit()

    def audit_entries(self, action: AuditAction | None = None) -> list[AuditEntry]:
        query = "SELECT at, actor, action, subject, detail FROM audit"
        params: tuple = ()
        if action is not None:
            query += " WHERE action=?"
            params = (action.value,)
        with self.lock:
            rows = self._conn.execute(query + " ORDER BY id", params).fetchall()
        return [
            AuditEntry(at=parse_rfc3339(r[0]), actor=r[1], action=AuditAction(r[2]),
                       subject=r[3], detail=r[4])
            for r in rows
        ]

    # -- forensics ---------------------------------------------------------------------------

    def export_log(self, path: str) -> int:
        """Raw event log as line-delimited JSON; returns the row count."""
        from .syncproto import event_to_wire
        events = self.iter_log()
        with open(path, "w", encoding="utf-8") as fh:
            for ev in events:
                fh.write(json.dumps(event_to_wire(ev), sort_keys=True) + "\n")
        return len(events)
