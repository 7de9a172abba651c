"""Idempotent edge-to-central synchronization.

Wire vocabulary (JSON field names frozen by contract tests), batch framing
with a CRC-32 over the canonical serialization, the HTTP client the edge
uses, and the background worker that pulls roster state and drains the
outbound event queue.  Connectivity failures back off exponentially and
never touch the scan path.
"""

from __future__ import annotations

import logging
import threading
import zlib
from dataclasses import dataclass
from datetime import date, datetime, timedelta

import requests

from .clock import Clock
from .domain import (
    AttendanceEvent,
    CardState,
    Method,
    RfidCard,
    Status,
    StudentRecord,
    parse_rfc3339,
    to_rfc3339,
)
from .errors import AuthExpired, ChecksumMismatch, SequenceGap

log = logging.getLogger(__name__)

MAX_BATCH_EVENTS = 500

BACKOFF_BASE_S = 5.0
BACKOFF_CAP_S = 300.0


# -- wire codecs ----------------------------------------------------------------

def event_to_wire(ev: AttendanceEvent) -> dict:
    return {
        "event_id": ev.event_id,
        "version": ev.version,
        "student_code": ev.student_code,
        "school_day": ev.school_day.isoformat(),
        "status": ev.status.value,
        "recorded_at": to_rfc3339(ev.recorded_at),
        "method": ev.method.value,
        "recorded_by": ev.recorded_by,
        "edge_sequence": ev.edge_sequence,
    }


def event_from_wire(data: dict) -> AttendanceEvent:
    return AttendanceEvent(
        event_id=data["event_id"],
        version=int(data["version"]),
        student_code=data["student_code"],
        school_day=date.fromisoformat(data["school_day"]),
        status=Status(data["status"]),
        recorded_at=parse_rfc3339(data["recorded_at"]),
        method=Method(data["method"]),
        recorded_by=data.get("recorded_by"),
        edge_sequence=data.get("edge_sequence"),
    )


def student_to_wire(s: StudentRecord) -> dict:
    return {
        "student_code": s.student_code,
        "given_names": s.given_names,
        "family_names": s.family_names,
        "enrollment_year": s.enrollment_year,
        "grade": s.grade,
        "section": s.section,
        "emergency_contact": s.emergency_contact,
        "active": s.active,
    }


def student_from_wire(data: dict) -> StudentRecord:
    return StudentRecord(
        student_code=data["student_code"],
        given_names=data["given_names"],
        family_names=data["family_names"],
        enrollment_year=int(data["enrollment_year"]),
        grade=int(data["grade"]),
        section=data["section"],
        emergency_contact=data.get("emergency_contact", ""),
        active=bool(data["active"]),
    )


def card_to_wire(c: RfidCard) -> dict:
    return {
        "uid": c.uid,
        "state": c.state.value,
        "linked_student": c.linked_student,
        "issued_at": to_rfc3339(c.issued_at),
    }


def card_from_wire(data: dict) -> RfidCard:
    return RfidCard(
        uid=data["uid"],
        state=CardState(data["state"]),
        linked_student=data.get("linked_student"),
        issued_at=parse_rfc3339(data["issued_at"]),
    )


# -- batches ----------------------------------------------------------------------

def canonical_event_line(ev: AttendanceEvent) -> str:
    return "|".join([
        ev.event_id,
        str(ev.version),
        ev.student_code,
        ev.school_day.isoformat(),
        ev.status.value,
        to_rfc3339(ev.recorded_at),
        ev.method.value,
        ev.recorded_by or "",
        str(ev.edge_sequence),
    ])


def batch_checksum(edge_node_id: str, first: int, last: int, events: list[AttendanceEvent]) -> int:
    lines = [edge_node_id, str(first), str(last)]
    lines.extend(canonical_event_line(ev) for ev in events)
    return zlib.crc32("\n".join(lines).encode("utf-8"))


@dataclass(frozen=True)
class SyncBatch:
    edge_node_id: str
    events: tuple
    first_sequence: int
    last_sequence: int
    checksum: int

    def __post_init__(self):
        if len(self.events) > MAX_BATCH_EVENTS:
            raise ValueError(f"batch exceeds {MAX_BATCH_EVENTS} events")
        seqs = [ev.edge_sequence for ev in self.events]
        if seqs and (seqs[0] != self.first_sequence or seqs[-1] != self.last_sequence
                     or seqs != list(range(self.first_sequence, self.last_sequence + 1))):
            raise ValueError("batch sequences must be contiguous and match the declared range")

    @classmethod
    def build(cls, edge_node_id: str, events: list[AttendanceEvent]) -> "SyncBatch":
        first = events[0].edge_sequence
        last = events[-1].edge_sequence
        return cls(
            edge_node_id=edge_node_id,
            events=tuple(events),
            first_sequence=first,
            last_sequence=last,
            checksum=batch_checksum(edge_node_id, first, last, events),
        )

    def verify_checksum(self) -> bool:
        return self.checksum == batch_checksum(
            self.edge_node_id, self.first_sequence, self.last_sequence, list(self.events)
        )

    def to_wire(self) -> dict:
        return {
            "edge_node_id": self.edge_node_id,
            "first_sequence": self.first_sequence,
            "last_sequence": self.last_sequence,
            "checksum": self.checksum,
            "events": [event_to_wire(ev) for ev in self.events],
        }

    @classmethod
    def from_wire(cls, data: dict) -> "SyncBatch":
        return cls(
            edge_node_id=data["edge_node_id"],
            events=tuple(event_from_wire(e) for e in data["events"]),
            first_sequence=int(data["first_sequence"]),
            last_sequence=int(data["last_sequence"]),
            checksum=int(data["checksum"]),
        )


@dataclass
class RosterDelta:
    version: int
    students: list
    cards: list
    events: list
    policy: dict | None = None


# -- HTTP client --------------------------------------------------------------------

class SyncClient:
    """Token-authenticated client for the central sync endpoints."""

    def __init__(self, base_url: str, node_id: str, node_key: str,
                 timeout: float = 10.0, session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.node_id = node_id
        self.node_key = node_key
        self.timeout = timeout
        self.session = session or requests.Session()
        self._token: str | None = None

    def authenticate(self) -> None:
        resp = self.session.post(
            f"{self.base_url}/api/v1/auth/token",
            json={"node_id": self.node_id, "node_key": self.node_key},
            timeout=self.timeout,
        )
        if resp.status_code != 200:
            raise AuthExpired(f"token request failed: {resp.status_code} {resp.text}")
        self._token = resp.json()["token"]

    def _headers(self) -> dict:
        if self._token is None:
            self.authenticate()
        return {"Authorization": f"Bearer {self._token}"}

    def _request(self, method: str, path: str, **kwargs):
        resp = self.session.request(
            method, f"{self.base_url}{path}", headers=self._headers(),
            timeout=self.timeout, **kwargs,
        )
        if resp.status_code == 401:
            # expired token: re-authenticate once and retry
            self._token = None
            resp = self.session.request(
                method, f"{self.base_url}{path}", headers=self._headers(),
                timeout=self.timeout, **kwargs,
            )
            if resp.status_code == 401:
                raise AuthExpired(resp.text)
        return resp

    def push_events(self, batch: SyncBatch) -> tuple[int, int]:
        resp = self._request("POST", "/api/v1/sync/events", json=batch.to_wire())
        if resp.status_code == 200:
            body = resp.json()
            return int(body["accepted_high_water"]), int(body["duplicates"])
        body = _json_or_empty(resp)
        code = body.get("error")
        if code == "checksum_mismatch":
            raise ChecksumMismatch(resp.text)
        if code == "sequence_gap":
            raise SequenceGap(resp.text, central_high_water=int(body["central_high_water"]))
        resp.raise_for_status()
        raise RuntimeError(f"unexpected push response {resp.status_code}: {resp.text}")

    def pull_roster(self, since_version: int) -> RosterDelta:
        resp = self._request("GET", f"/api/v1/sync/roster", params={"since": since_version})
        if resp.status_code != 200:
            resp.raise_for_status()
        body = resp.json()
        return RosterDelta(
            version=int(body["version"]),
            students=[student_from_wire(s) for s in body["students"]],
            cards=[card_from_wire(c) for c in body["cards"]],
            events=[event_from_wire(e) for e in body["events"]],
            policy=body.get("policy"),
        )


def _json_or_empty(resp) -> dict:
    try:
        return resp.json()
    except ValueError:
        return {}


# -- background worker -----------------------------------------------------------------

class SyncWorker:
    """Pull-then-push loop; backs off on failure, isolated from the scan path."""

    def __init__(self, store, client: SyncClient, clock: Clock,
                 interval_s: float = 15.0, engine=None,
                 backoff_base_s: float = BACKOFF_BASE_S, backoff_cap_s: float = BACKOFF_CAP_S):
        self.store = store
        self.client = client
        self.clock = clock
        self.interval_s = interval_s
        self.engine = engine
        self.backoff_base_s = backoff_base_s
        self.backoff_cap_s = backoff_cap_s
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.cycles = 0
        self.failures = 0

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="sync-worker", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _run(self) -> None:
        consecutive_failures = 0
        while not self._stop.is_set():
            try:
                self.sync_once()
                consecutive_failures = 0
                delay = self.interval_s
            except Exception as exc:  # connectivity problems must never escape
                consecutive_failures += 1
                self.failures += 1
                delay = min(self.backoff_cap_s,
                            self.backoff_base_s * (2 ** (consecutive_failures - 1)))
                log.warning("sync failed (%s); backing off %.0fs", exc, delay)
            target = self.clock.now() + timedelta(seconds=delay)
            if not self.clock.wait_until(target, interrupt=self._stop):
                return

    def sync_once(self) -> None:
        """One pull-then-push cycle; raises on connectivity failure."""
        self._pull()
        self._drain()
        self.cycles += 1

    def _pull(self) -> None:
        delta = self.client.pull_roster(self.store.roster_version())
        if (delta.students or delta.cards or delta.events
                or delta.version != self.store.roster_version()):
            self.store.apply_roster_delta(delta)
        if delta.policy is not None and self.engine is not None:
            from .engine import TimeWindowPolicy
            policy = TimeWindowPolicy.from_wire(delta.policy)
            if policy != self.engine.policy:
                self.engine.set_policy(policy)

    def _drain(self) -> None:
        while not self._stop.is_set():
            batch = self.store.pending_batch(MAX_BATCH_EVENTS)
            if batch is None:
                return
            try:
                hw, dupes = self.client.push_events(batch)
            except ChecksumMismatch:
                log.warning("checksum rejected; retransmitting batch %s..%s",
                            batch.first_sequence, batch.last_sequence)
                continue
            except SequenceGap as gap:
                self._handle_gap(gap.central_high_water)
                continue
            if dupes:
                log.info("central deduplicated %d events", dupes)
            if hw > self.store.high_water_synced():
                self.store.mark_synced(min(hw, self.store.max_sequence()))

    def _handle_gap(self, central_hw: int) -> None:
        ours = self.store.high_water_synced()
        if central_hw > ours:
            # central already holds more than we recorded (ack lost in a crash)
            self.store.mark_synced(min(central_hw, self.store.max_sequence()))
            return
        # central is behind our durable mark: replay history from its position
        log.warning("central high water %d behind ours %d; replaying", central_hw, ours)
        seq = central_hw
        while seq < ours and not self._stop.is_set():
            events = self.store.read_log(seq + 1, MAX_BATCH_EVENTS)
            if not events:
                return
            batch = SyncBatch.build(self.store.node_id, events)
            hw, _ = self.client.push_events(batch)
            seq = batch.last_sequence
