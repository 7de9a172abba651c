"""Authoritative central storage: roster, cards, actors, events, audit, feed.

Same embedded engine as the edge, behind one writer lock.  Event ingest is
idempotent: the (event_id, version) pair dedups replays, and (student, day)
conflicts between different lineages resolve to the earliest recorded_at
with the loser written to the audit trail, never silently dropped.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
import sqlite3
import threading
import time
from datetime import date, datetime, timedelta

from .clock import Clock
from .domain import (
    AttendanceEvent,
    AuditAction,
    AuditEntry,
    CardState,
    Method,
    RfidCard,
    Status,
    StudentRecord,
    generate_student_code,
    new_event_id,
    parse_rfc3339,
    plan_enrollment,
    prefer_event,
    to_rfc3339,
)
from .errors import (
    AuthExpired,
    CursorExpired,
    FutureDate,
    NotAbsent,
    RateLimited,
    SequenceGap,
    UnknownCard,
    UnknownStudent,
)
from .rbac import Principal, Role
from .syncproto import SyncBatch

PBKDF2_ITERATIONS = 100_000
LOGIN_FAILURE_LIMIT = 5       # failures per minute per username
LOGIN_FAILURE_WINDOW_S = 60.0

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
    active INTEGER NOT NULL DEFAULT 1,
    changed_version INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS cards(
    uid TEXT PRIMARY KEY,
    state TEXT NOT NULL,
    linked_student TEXT,
    issued_at TEXT NOT NULL,
    changed_version INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS events(
    event_id TEXT PRIMARY KEY,
    version INTEGER NOT NULL,
    student_code TEXT NOT NULL,
    school_day TEXT NOT NULL,
    status TEXT NOT NULL,
    recorded_at TEXT NOT NULL,
    method TEXT NOT NULL,
    recorded_by TEXT,
    source TEXT NOT NULL,
    changed_version INTEGER NOT NULL DEFAULT 0,
    UNIQUE(student_code, school_day)
);
CREATE INDEX IF NOT EXISTS idx_events_day ON events(school_day);
CREATE TABLE IF NOT EXISTS node_hw(
    node_id TEXT PRIMARY KEY,
    high_water INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS actors(
    username TEXT PRIMARY KEY,
    role TEXT NOT NULL,
    pw_salt BLOB NOT NULL,
    pw_hash BLOB NOT NULL,
    student_code TEXT,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS teacher_scope(
    username TEXT NOT NULL,
    grade INTEGER NOT NULL,
    section TEXT NOT NULL,
    PRIMARY KEY(username, grade, section)
);
CREATE TABLE IF NOT EXISTS nodes(
    node_id TEXT PRIMARY KEY,
    key_salt BLOB NOT NULL,
    key_hash BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS tokens(
    token TEXT PRIMARY KEY,
    kind TEXT NOT NULL,
    principal TEXT NOT NULL,
    expires_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS audit(
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    at TEXT NOT NULL,
    actor TEXT NOT NULL,
    action TEXT NOT NULL,
    subject TEXT NOT NULL,
    detail TEXT NOT NULL DEFAULT ''
);
CREATE TABLE IF NOT EXISTS feed(
    change_seq INTEGER PRIMARY KEY AUTOINCREMENT,
    school_day TEXT NOT NULL,
    event_id TEXT NOT NULL
);
"""

_EVENT_COLS = ("event_id, version, student_code, school_day, status, recorded_at, "
               "method, recorded_by")


def _hash_secret(secret: str, salt: bytes) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", secret.encode(), salt, PBKDF2_ITERATIONS)


def _row_to_event(row) -> AttendanceEvent:
    return AttendanceEvent(
        event_id=row[0], version=row[1], student_code=row[2],
        school_day=date.fromisoformat(row[3]), status=Status(row[4]),
        recorded_at=parse_rfc3339(row[5]), method=Method(row[6]), recorded_by=row[7],
    )


class CentralStore:
    """Writers serialize on `lock`; readers run on per-thread connections so a
    WAL snapshot isolates them from in-flight write transactions."""

    def __init__(self, path: str, clock: Clock):
        self.clock = clock
        self.path = path
        self.lock = threading.RLock()
        self._tlocal = threading.local()
        self._conns: list[sqlite3.Connection] = []
        self._conns_lock = threading.Lock()
        self._closed = False
        self._conn.executescript(_SCHEMA)
        self.feed_changed = threading.Condition()
        self._login_failures: dict[str, list[float]] = {}

    @property
    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._tlocal, "conn", None)
        if conn is None:
            if self._closed:
                raise sqlite3.ProgrammingError("store is closed")
            conn = sqlite3.connect(self.path, check_same_thread=False,
                                   isolation_level=None, timeout=10.0)
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA synchronous=NORMAL")
            conn.execute("PRAGMA busy_timeout=10000")
            self._tlocal.conn = conn
            with self._conns_lock:
                self._conns.append(conn)
        return conn

    def close(self) -> None:
        self._closed = True
        with self._conns_lock:
            for conn in self._conns:
                try:
                    conn.close()
                except sqlite3.Error:
                    pass
            self._conns.clear()

    def _begin(self):
        self._conn.execute("BEGIN IMMEDIATE")

    def _commit(self):
        self._conn.execute("COMMIT")

    def _rollback(self):
        try:
            self._conn.execute("ROLLBACK")
        except sqlite3.Error:
            pass

    # -- version counter ---------------------------------------------------------

    def roster_version(self) -> int:
        row = self._conn.execute("SELECT value FROM meta WHERE key='roster_version'").fetchone()
        return int(row[0]) if row else 0

    def _bump_version(self) -> int:
        v = self.roster_version() + 1
        self._conn.execute(
            "INSERT INTO meta(key, value) VALUES('roster_version', ?) "
            "ON CONFLICT(key) DO UPDATE SET value=excluded.value", (str(v),))
        return v

    # -- audit ----------------------------------------------------------------------

    def _audit_row(self, actor: str, action: AuditAction, subject: str, detail: str = "") -> None:
        self._conn.execute(
            "INSERT INTO audit(at, actor, action, subject, detail) VALUES(?,?,?,?,?)",
            (to_rfc3339(self.clock.now()), actor, action.value, subject, detail))

    def audit(self, actor: str, action: AuditAction, subject: str, detail: str = "") -> None:
        with self.lock:
            self._begin()
            self._audit_row(actor, action, subject, detail)
            self._commit()

    def audit_entries(self, action: AuditAction | None = None) -> list[AuditEntry]:
        query = "SELECT at, actor, action, subject, detail FROM audit"
        params: tuple = ()
        if action is not None:
            query += " WHERE action=?"
            params = (action.value,)
        rows = self._conn.execute(query + " ORDER BY id", params).fetchall()
        return [AuditEntry(parse_rfc3339(r[0]), r[1], AuditAction(r[2]), r[3], r[4])
                for r in rows]

    # -- roster management --------------------------------------------------------------

    def create_student(self, given_names: str, family_names: str, enrollment_year: int,
                       grade: int, section: str, emergency_contact: str, actor: str) -> StudentRecord:
        with self.lock:
            self._begin()
            try:
                roster = [r[0] for r in self._conn.execute("SELECT student_code FROM students")]
                code = generate_student_code(enrollment_year, grade, section, roster)
                student = StudentRecord(
                    student_code=code, given_names=given_names, family_names=family_names,
                    enrollment_year=enrollment_year, grade=grade, section=section,
                    emergency_contact=emergency_contact, active=True,
                )
                v = self._bump_version()
                self._conn.execute(
                    "INSERT INTO students VALUES(?,?,?,?,?,?,?,?,?)",
                    (code, given_names, family_names, enrollment_year, grade, section,
                     emergency_contact, 1, v))
                self._audit_row(actor, AuditAction.ENROLL, f"student:{code}")
                self._commit()
                return student
            except BaseException:
                self._rollback()
                raise

    def set_student_active(self, student_code: str, active: bool, actor: str) -> StudentRecord:
        with self.lock:
            self._begin()
            try:
                student = self._get_student(student_code)
                if student is None:
                    raise UnknownStudent(student_code)
                v = self._bump_version()
                self._conn.execute(
                    "UPDATE students SET active=?, changed_version=? WHERE student_code=?",
                    (int(active), v, student_code))
                if not active:
                    # deactivation also blocks the student's cards
                    for row in self._conn.execute(
                            "SELECT uid FROM cards WHERE linked_student=? AND state='active'",
                            (student_code,)).fetchall():
                        self._conn.execute(
                            "UPDATE cards SET state='blocked', changed_version=? WHERE uid=?",
                            (v, row[0]))
                        self._audit_row(actor, AuditAction.BLOCK, f"card:{row[0]}",
                                        "student deactivated")
                self._audit_row(actor, AuditAction.ENROLL, f"student:{student_code}",
                                f"active={active}")
                self._commit()
                return self._get_student(student_code)
            except BaseException:
                self._rollback()
                raise

    def _get_student(self, code: str) -> StudentRecord | None:
        row = self._conn.execute(
            "SELECT student_code, given_names, family_names, enrollment_year, grade, section, "
            "emergency_contact, active FROM students WHERE student_code=?", (code,)).fetchone()
        if row is None:
            return None
        return StudentRecord(student_code=row[0], given_names=row[1], family_names=row[2],
                             enrollment_year=row[3], grade=row[4], section=row[5],
                             emergency_contact=row[6], active=bool(row[7]))

    def get_student(self, code: str) -> StudentRecord | None:
        return self._get_student(code)

    def students(self, grade: int | None = None, section: str | None = None) -> list[StudentRecord]:
        query = ("SELECT student_code, given_names, family_names, enrollment_year, grade, "
                 "section, emergency_contact, active FROM students")
        clauses, params = [], []
        if grade is not None:
            clauses.append("grade=?")
            params.append(grade)
        if section is not None:
            clauses.append("section=?")
            params.append(section)
        if clauses:
            query += " WHERE " + " AND ".join(clauses)
        rows = self._conn.execute(query + " ORDER BY student_code", params).fetchall()
        return [StudentRecord(student_code=r[0], given_names=r[1], family_names=r[2],
                              enrollment_year=r[3], grade=r[4], section=r[5],
                              emergency_contact=r[6], active=bool(r[7])) for r in rows]

    def active_student_count(self) -> int:
        return self._conn.execute("SELECT COUNT(*) FROM students WHERE active=1").fetchone()[0]

    # -- cards ------------------------------------------------------------------------------

    def _get_card(self, uid: str) -> RfidCard | None:
        row = self._conn.execute(
            "SELECT uid, state, linked_student, issued_at FROM cards WHERE uid=?", (uid,)).fetchone()
        if row is None:
            return None
        return RfidCard(uid=row[0], state=CardState(row[1]), linked_student=row[2],
                        issued_at=parse_rfc3339(row[3]))

    def get_card(self, uid: str) -> RfidCard | None:
        return self._get_card(uid)

    def cards(self) -> list[RfidCard]:
        rows = self._conn.execute(
            "SELECT uid, state, linked_student, issued_at FROM cards ORDER BY uid").fetchall()
        return [RfidCard(uid=r[0], state=CardState(r[1]), linked_student=r[2],
                         issued_at=parse_rfc3339(r[3])) for r in rows]

    def enroll_card(self, uid: str, student_code: str, actor: str) -> RfidCard:
        with self.lock:
            self._begin()
            try:
                cards = {c.uid: c for c in self._all_cards()}
                students = {}
                student = self._get_student(student_code)
                if student is not None:
                    students[student_code] = student
                changes = plan_enrollment(uid, student_code, cards, students, self.clock.now())
                v = self._bump_version()
                for card in changes:
                    self._upsert_card(card, v)
                    if card.state is CardState.BLOCKED:
                        self._audit_row(actor, AuditAction.BLOCK, f"card:{card.uid}",
                                        "superseded by re-enrollment")
                enrolled = changes[-1]
                self._audit_row(actor, AuditAction.ENROLL, f"card:{enrolled.uid}",
                                f"student={student_code}")
                self._commit()
                return enrolled
            except BaseException:
                self._rollback()
                raise

    def _all_cards(self) -> list[RfidCard]:
        rows = self._conn.execute(
            "SELECT uid, state, linked_student, issued_at FROM cards").fetchall()
        return [RfidCard(uid=r[0], state=CardState(r[1]), linked_student=r[2],
                         issued_at=parse_rfc3339(r[3])) for r in rows]

    def _upsert_card(self, card: RfidCard, version: int) -> None:
        self._conn.execute(
            "INSERT INTO cards VALUES(?,?,?,?,?) "
            "ON CONFLICT(uid) DO UPDATE SET state=excluded.state, "
            "linked_student=excluded.linked_student, issued_at=excluded.issued_at, "
            "changed_version=excluded.changed_version",
            (card.uid, card.state.value, card.linked_student,
             to_rfc3339(card.issued_at), version))

    def set_card_state(self, uid: str, state: CardState, actor: str) -> RfidCard:
        with self.lock:
            self._begin()
            try:
                card = self._get_card(uid)
                if card is None:
                    raise UnknownCard(uid)
                if card.state is state:
                    self._commit()  # idempotent no-op
                    return card
                updated = RfidCard(uid=card.uid, state=state,
                                   linked_student=card.linked_student, issued_at=card.issued_at)
                self._upsert_card(updated, self._bump_version())
                action = AuditAction.BLOCK if state is CardState.BLOCKED else AuditAction.UNBLOCK
                self._audit_row(actor, action, f"card:{uid}")
                self._commit()
                return updated
            except BaseException:
                self._rollback()
                raise

    # -- actors and tokens ---------------------------------------------------------------------

    def create_actor(self, username: str, password: str, role: Role, actor: str,
                     student_code: str | None = None,
                     scopes: list[tuple[int, str]] | None = None) -> None:
        salt = secrets.token_bytes(16)
        with self.lock:
            self._begin()
            try:
                self._conn.execute(
                    "INSERT INTO actors VALUES(?,?,?,?,?,?) "
                    "ON CONFLICT(username) DO UPDATE SET role=excluded.role, "
                    "pw_salt=excluded.pw_salt, pw_hash=excluded.pw_hash, "
                    "student_code=excluded.student_code",
                    (username, role.value, salt, _hash_secret(password, salt),
                     student_code, to_rfc3339(self.clock.now())))
                self._conn.execute("DELETE FROM teacher_scope WHERE username=?", (username,))
                for grade, section in scopes or []:
                    self._conn.execute("INSERT INTO teacher_scope VALUES(?,?,?)",
                                       (username, grade, section))
                self._audit_row(actor, AuditAction.ENROLL, f"actor:{username}",
                                f"role={role.value}")
                self._commit()
            except BaseException:
                self._rollback()
                raise

    def register_node(self, node_id: str, node_key: str) -> None:
        salt = secrets.token_bytes(16)
        with self.lock:
            self._begin()
            self._conn.execute(
                "INSERT INTO nodes VALUES(?,?,?) "
                "ON CONFLICT(node_id) DO UPDATE SET key_salt=excluded.key_salt, "
                "key_hash=excluded.key_hash",
                (node_id, salt, _hash_secret(node_key, salt)))
            self._commit()

    def verify_login(self, username: str, password: str) -> Principal:
        now_s = self.clock.now().timestamp()
        with self.lock:
            failures = [t for t in self._login_failures.get(username, [])
                        if now_s - t < LOGIN_FAILURE_WINDOW_S]
            self._login_failures[username] = failures
            if len(failures) >= LOGIN_FAILURE_LIMIT:
                self.audit("login", AuditAction.LOGIN_FAIL, username, "rate limited")
                raise RateLimited(f"too many failed logins for {username}")
            row = self._conn.execute(
                "SELECT role, pw_salt, pw_hash, student_code FROM actors WHERE username=?",
                (username,)).fetchone()
            ok = row is not None and hmac.compare_digest(
                _hash_secret(password, row[1]), row[2])
            if not ok:
                self._login_failures.setdefault(username, []).append(now_s)
                self.audit("login", AuditAction.LOGIN_FAIL, username, "bad credentials")
                raise AuthExpired("bad credentials")
            scopes = tuple(
                (r[0], r[1]) for r in self._conn.execute(
                    "SELECT grade, section FROM teacher_scope WHERE username=?",
                    (username,)).fetchall())
            return Principal(kind="user", name=username, role=Role(row[0]),
                             student_code=row[3], scopes=scopes)

    def verify_node_key(self, node_id: str, node_key: str) -> bool:
        row = self._conn.execute(
            "SELECT key_salt, key_hash FROM nodes WHERE node_id=?", (node_id,)).fetchone()
        return row is not None and hmac.compare_digest(_hash_secret(node_key, row[0]), row[1])

    def issue_token(self, kind: str, principal: str, ttl_s: float) -> tuple[str, datetime]:
        token = secrets.token_hex(32)   # 256-bit opaque bearer value
        expires = self.clock.now() + timedelta(seconds=ttl_s)
        with self.lock:
            self._begin()
            self._conn.execute("INSERT INTO tokens VALUES(?,?,?,?)",
                               (token, kind, principal, to_rfc3339(expires)))
            self._commit()
        return token, expires

    def resolve_token(self, token: str) -> Principal:
        row = self._conn.execute(
            "SELECT kind, principal, expires_at FROM tokens WHERE token=?", (token,)).fetchone()
        if row is None:
            raise AuthExpired("unknown token")
        if parse_rfc3339(row[2]) <= self.clock.now():
            raise AuthExpired("token expired")
        kind, name = row[0], row[1]
        if kind == "node":
            return Principal(kind="node", name=name)
        actor = self._conn.execute(
            "SELECT role, student_code FROM actors WHERE username=?", (name,)).fetchone()
        if actor is None:
            raise AuthExpired("actor removed")
        scopes = tuple(
            (r[0], r[1]) for r in self._conn.execute(
                "SELECT grade, section FROM teacher_scope WHERE username=?", (name,)).fetchall())
        return Principal(kind="user", name=name, role=Role(actor[0]),
                         student_code=actor[1], scopes=scopes)

    # -- event ingest -----------------------------------------------------------------------------

    def _current_for_day(self, student_code: str, day: date) -> AttendanceEvent | None:
        row = self._conn.execute(
            f"SELECT {_EVENT_COLS} FROM events WHERE student_code=? AND school_day=?",
            (student_code, day.isoformat())).fetchone()
        return _row_to_event(row) if row else None

    def _feed_row(self, ev: AttendanceEvent) -> None:
        self._conn.execute("INSERT INTO feed(school_day, event_id) VALUES(?,?)",
                           (ev.school_day.isoformat(), ev.event_id))

    def _apply_event(self, ev: AttendanceEvent, source: str, changed_version: int = 0) -> str:
        """Idempotent single-event apply; returns inserted|updated|duplicate."""
        row = self._conn.execute(
            "SELECT version FROM events WHERE event_id=?", (ev.event_id,)).fetchone()
        if row is not None:
            if ev.version <= row[0]:
                return "duplicate"
            self._conn.execute(
                "UPDATE events SET version=?, status=?, recorded_at=?, method=?, "
                "recorded_by=?, changed_version=? WHERE event_id=?",
                (ev.version, ev.status.value, to_rfc3339(ev.recorded_at), ev.method.value,
                 ev.recorded_by, changed_version, ev.event_id))
            self._feed_row(ev)
            return "updated"
        holder = self._current_for_day(ev.student_code, ev.school_day)
        if holder is not None:
            winner = prefer_event(holder, ev)
            if winner.event_id == holder.event_id:
                self._audit_row(source, AuditAction.SYNC_PUSH,
                                f"{ev.student_code}:{ev.school_day.isoformat()}",
                                f"conflict loser {ev.event_id} "
                                f"({ev.status.value}@{to_rfc3339(ev.recorded_at)}) "
                                f"kept {holder.event_id}")
                return "duplicate"
            self._conn.execute("DELETE FROM events WHERE event_id=?", (holder.event_id,))
            self._audit_row(source, AuditAction.SYNC_PUSH,
                            f"{ev.student_code}:{ev.school_day.isoformat()}",
                            f"conflict loser {holder.event_id} "
                            f"({holder.status.value}@{to_rfc3339(holder.recorded_at)}) "
                            f"replaced by {ev.event_id}")
        self._conn.execute(
            "INSERT INTO events VALUES(?,?,?,?,?,?,?,?,?,?)",
            (ev.event_id, ev.version, ev.student_code, ev.school_day.isoformat(),
             ev.status.value, to_rfc3339(ev.recorded_at), ev.method.value,
             ev.recorded_by, source, changed_version))
        self._feed_row(ev)
        return "inserted"

    def node_high_water(self, node_id: str) -> int:
        row = self._conn.execute(
            "SELECT high_water FROM node_hw WHERE node_id=?", (node_id,)).fetchone()
        return row[0] if row else 0

    def ingest_batch(self, batch: SyncBatch) -> tuple[int, int]:
        """Apply a pushed batch; returns (accepted_high_water, duplicates)."""
        node = batch.edge_node_id
        with self.lock:
            hw = self.node_high_water(node)
            if batch.first_sequence > hw + 1:
                raise SequenceGap(f"expected {hw + 1}, got {batch.first_sequence}",
                                  central_high_water=hw)
            self._begin()
            try:
                duplicates = 0
                for ev in batch.events:
                    if self._apply_event(ev, source=node) == "duplicate":
                        duplicates += 1
                new_hw = max(hw, batch.last_sequence)
                self._conn.execute(
                    "INSERT INTO node_hw VALUES(?,?) "
                    "ON CONFLICT(node_id) DO UPDATE SET high_water=excluded.high_water",
                    (node, new_hw))
                self._audit_row(node, AuditAction.SYNC_PUSH,
                                f"batch:{batch.first_sequence}-{batch.last_sequence}",
                                f"events={len(batch.events)} duplicates={duplicates}")
                self._commit()
            except BaseException:
                self._rollback()
                raise
        with self.feed_changed:
            self.feed_changed.notify_all()
        return new_hw, duplicates

    # -- manual marking ------------------------------------------------------------------------------

    def manual_mark(self, actor: str, student_code: str, day: date, status: Status,
                    note: str, today: date) -> AttendanceEvent:
        if status not in (Status.PRESENT, Status.LATE, Status.ABSENT):
            raise ValueError("manual marks are present, late, or absent")
        if day > today:
            raise FutureDate(f"{day.isoformat()} is in the future")
        with self.lock:
            self._begin()
            try:
                if self._get_student(student_code) is None:
                    raise UnknownStudent(student_code)
                existing = self._current_for_day(student_code, day)
                v = self._bump_version()
                if existing is None:
                    ev = AttendanceEvent(
                        event_id=new_event_id(), version=1, student_code=student_code,
                        school_day=day, status=status, recorded_at=self.clock.now(),
                        method=Method.MANUAL, recorded_by=actor)
                    prior = "none"
                else:
                    ev = AttendanceEvent(
                        event_id=existing.event_id, version=existing.version + 1,
                        student_code=student_code, school_day=day, status=status,
                        recorded_at=existing.recorded_at, method=Method.MANUAL,
                        recorded_by=actor)
                    prior = f"{existing.status.value}/{existing.method.value}"
                self._apply_event(ev, source="central", changed_version=v)
                self._audit_row(actor, AuditAction.MANUAL_MARK,
                                f"{student_code}:{day.isoformat()}",
                                f"status={status.value} was={prior} note={note}")
                self._commit()
            except BaseException:
                self._rollback()
                raise
        with self.feed_changed:
            self.feed_changed.notify_all()
        return ev

    def justify(self, actor: str, student_code: str, day: date, note: str) -> AttendanceEvent:
        with self.lock:
            self._begin()
            try:
                existing = self._current_for_day(student_code, day)
                if existing is None or existing.status is not Status.ABSENT:
                    raise NotAbsent(f"no absent record for {student_code} on {day}")
                v = self._bump_version()
                ev = AttendanceEvent(
                    event_id=existing.event_id, version=existing.version + 1,
                    student_code=student_code, school_day=day, status=Status.JUSTIFIED,
                    recorded_at=existing.recorded_at, method=Method.MANUAL, recorded_by=actor)
                self._apply_event(ev, source="central", changed_version=v)
                self._audit_row(actor, AuditAction.JUSTIFY,
                                f"{student_code}:{day.isoformat()}",
                                f"was={existing.status.value}/{existing.method.value} note={note}")
                self._commit()
            except BaseException:
                self._rollback()
                raise
        with self.feed_changed:
            self.feed_changed.notify_all()
        return ev

    # -- queries -----------------------------------------------------------------------------------------

    def query_events(self, date_from: date, date_to: date,
                     grade: int | None = None, section: str | None = None,
                     student: str | None = None, status: Status | None = None,
                     scope_pairs: list[tuple[int, str]] | None = None,
                     page: int = 1, page_size: int = 100):
        """Stable (day, student) ordering; aggregates span the whole filtered set."""
        clauses = ["e.school_day >= ?", "e.school_day <= ?"]
        params: list = [date_from.isoformat(), date_to.isoformat()]
        joins = " JOIN students s ON s.student_code = e.student_code"
        if grade is not None:
            clauses.append("s.grade = ?")
            params.append(grade)
        if section is not None:
            clauses.append("s.section = ?")
            params.append(section)
        if student is not None:
            clauses.append("e.student_code = ?")
            params.append(student)
        if status is not None:
            clauses.append("e.status = ?")
            params.append(status.value)
        if scope_pairs is not None:
            if not scope_pairs:
                clauses.append("0")
            else:
                ors = " OR ".join("(s.grade=? AND s.section=?)" for _ in scope_pairs)
                clauses.append(f"({ors})")
                for g, sec in scope_pairs:
                    params.extend([g, sec])
        where = " WHERE " + " AND ".join(clauses)
        cols = ", ".join("e." + c.strip() for c in _EVENT_COLS.split(","))
        rows = self._conn.execute(
            f"SELECT {cols} FROM events e{joins}{where} "
            "ORDER BY e.school_day, e.student_code LIMIT ? OFFSET ?",
            params + [page_size, (page - 1) * page_size]).fetchall()
        counts = dict(self._conn.execute(
            f"SELECT e.status, COUNT(*) FROM events e{joins}{where} GROUP BY e.status",
            params).fetchall())
        total = self._conn.execute(
            f"SELECT COUNT(*) FROM events e{joins}{where}", params).fetchone()[0]
        aggregates = {s.value: counts.get(s.value, 0) for s in Status}
        return [_row_to_event(r) for r in rows], total, aggregates

    def events_for_day(self, day: date) -> list[AttendanceEvent]:
        rows = self._conn.execute(
            f"SELECT {_EVENT_COLS} FROM events WHERE school_day=? "
            "ORDER BY student_code", (day.isoformat(),)).fetchall()
        return [_row_to_event(r) for r in rows]

    def all_event_ids(self) -> set[str]:
        return {r[0] for r in self._conn.execute("SELECT event_id FROM events")}

    # -- live feed ----------------------------------------------------------------------------------------

    def feed_cursor(self) -> int:
        return self._conn.execute("SELECT COALESCE(MAX(change_seq), 0) FROM feed").fetchone()[0]

    def feed_after(self, day: date, cursor: int) -> tuple[list[AttendanceEvent], int]:
        top = self.feed_cursor()
        if cursor > top:
            raise CursorExpired(f"cursor {cursor} beyond feed end {top}")
        rows = self._conn.execute(
            f"SELECT f.change_seq, {', '.join('e.' + c.strip() for c in _EVENT_COLS.split(','))} "
            "FROM feed f JOIN events e ON e.event_id = f.event_id "
            "WHERE f.school_day=? AND f.change_seq > ? AND f.change_seq <= ? "
            "ORDER BY f.change_seq",
            (day.isoformat(), cursor, top)).fetchall()
        events = [_row_to_event(r[1:]) for r in rows]
        return events, top

    def wait_for_feed(self, day: date, cursor: int, timeout_s: float,
                      stop_event: threading.Event) -> tuple[list[AttendanceEvent], int]:
        """Long-poll helper: block until events past the cursor exist for the day."""
        deadline = time.monotonic() + timeout_s
        while True:
            events, top = self.feed_after(day, cursor)
            if events or stop_event.is_set():
                return events, top
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return [], top
            # capped wait bounds the lost-wakeup race between check and wait
            with self.feed_changed:
                self.feed_changed.wait(timeout=min(remaining, 1.0))

    # -- sync pull -------------------------------------------------------------------------------------------

    def roster_delta(self, since: int):
        # version is read before the rows: a write that lands in between is
        # re-delivered on the next pull, never skipped
        version = self.roster_version()
        students = [StudentRecord(student_code=r[0], given_names=r[1], family_names=r[2],
                                  enrollment_year=r[3], grade=r[4], section=r[5],
                                  emergency_contact=r[6], active=bool(r[7]))
                    for r in self._conn.execute(
                        "SELECT student_code, given_names, family_names, enrollment_year, "
                        "grade, section, emergency_contact, active FROM students "
                        "WHERE changed_version > ? ORDER BY student_code", (since,))]
        cards = [RfidCard(uid=r[0], state=CardState(r[1]), linked_student=r[2],
                          issued_at=parse_rfc3339(r[3]))
                 for r in self._conn.execute(
                     "SELECT uid, state, linked_student, issued_at FROM cards "
                     "WHERE changed_version > ? ORDER BY uid", (since,))]
        events = [_row_to_event(r) for r in self._conn.execute(
            f"SELECT {_EVENT_COLS} FROM events WHERE source='central' "
            "AND changed_version > ? ORDER BY school_day, student_code", (since,))]
        return version, students, cards, events
