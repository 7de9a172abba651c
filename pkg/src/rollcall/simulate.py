"""Accelerated end-to-end morning simulation.

Wires emulated readers -> edge node -> sync -> central service through real
sockets, drives everything from one shared virtual clock, and compares the
final central state against a brute-force oracle computed independently from
the arrival plan.  The conformance report is deterministic for a given seed:
it contains plan-derived counts and oracle verdicts, never wall-clock
measurements (latency statistics are returned separately).

An optional partition window severs the edge-central link at the TCP level
while reader traffic continues; after reconnection the drain phase must
deliver every event exactly once.
"""

from __future__ import annotations

import logging
import random
import socket
import tempfile
import threading
import time as _time
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta

from .apiclient import CentralClient
from .central import CentralService
from .centralstore import CentralStore
from .clock import VirtualClock
from .domain import AuditAction, Status
from .edge import EdgeNode
from .engine import Classification, TimeWindowPolicy, classify
from .rbac import Role
from .readerlink import ReaderEmulator

log = logging.getLogger(__name__)

GIVEN_NAMES = ["Ana", "Luis", "Maria", "Jose", "Carmen", "Pedro", "Rosa", "Juan",
               "Elena", "Miguel", "Sofia", "Diego", "Lucia", "Carlos", "Elsa", "Raul"]
FAMILY_NAMES = ["Quispe", "Mamani", "Condori", "Huanca", "Flores", "Apaza", "Choque",
                "Ticona", "Calcina", "Vilca", "Churata", "Coaquira"]

ADMIN_USER = "sim-admin"
ADMIN_PASSWORD = "sim-admin-pw"
NODE_ID = "edge-sim"
NODE_KEY = "sim-node-key"


@dataclass(frozen=True)
class SimulationSpec:
    students: int
    readers: int = 1
    day: date = date(2025, 8, 4)
    seed: int = 0
    speed: float = 60.0            # virtual seconds per wall second; 0 = no pacing
    partition: tuple[time, time] | None = None
    sync_interval_s: float = 45.0  # virtual
    # "full" spreads arrivals 06:55-08:40 with late/post-closure stragglers;
    # "compressed" squeezes every scan into the 07:00-08:00 hour
    arrival_profile: str = "full"

# pacing models arrival load; idle stretches longer than this fast-forward
MAX_PACED_GAP_S = 60.0


@dataclass(frozen=True)
class PlannedScan:
    at: datetime
    reader: int
    uid: str


@dataclass
class SimulationResult:
    ok: bool
    report: str
    latencies_ms: list = field(default_factory=list)
    central_counts: dict = field(default_factory=dict)
    mismatches: list = field(default_factory=list)
    sync_failures: int = 0


class GateProxy:
    """TCP forwarder between edge and central; severing it simulates a partition."""

    def __init__(self, target: tuple[str, int], host: str = "127.0.0.1", port: int = 0):
        self.target = target
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.port = self._listener.getsockname()[1]
        self.connected = True
        self._active: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, name="gate-proxy",
                                        daemon=True)

    def start(self) -> None:
        self._thread.start()

    def set_connected(self, value: bool) -> None:
        self.connected = value
        if not value:
            with self._lock:
                for sock in list(self._active):
                    try:
                        sock.close()
                    except OSError:
                        pass
                self._active.clear()

    def stop(self) -> None:
        self._stop.set()
        self.set_connected(False)
        try:
            self._listener.close()
        except OSError:
            pass
        self._thread.join(timeout=5)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            if not self.connected:
                client.close()
                continue
            try:
                upstream = socket.create_connection(self.target, timeout=5)
            except OSError:
                client.close()
                continue
            with self._lock:
                self._active.update((client, upstream))
            threading.Thread(target=self._pump, args=(client, upstream), daemon=True).start()
            threading.Thread(target=self._pump, args=(upstream, client), daemon=True).start()

    def _pump(self, src: socket.socket, dst: socket.socket) -> None:
        try:
            while True:
                data = src.recv(8192)
                if not data:
                    break
                dst.sendall(data)
        except OSError:
            pass
        finally:
            for sock in (src, dst):
                try:
                    sock.close()
                except OSError:
                    pass
            with self._lock:
                self._active.discard(src)
                self._active.discard(dst)


@dataclass
class ArrivalPlan:
    students: list            # (given, family, grade, section)
    uids: list                # uid per student index
    blocked: set              # student indexes with pre-blocked cards
    absent: set               # student indexes that never scan
    scans: list               # PlannedScan, time-ordered
    unknown_uids: set

    @property
    def uid_owner(self) -> dict:
        return {uid: i for i, uid in enumerate(self.uids)}


def build_plan(spec: SimulationSpec, policy: TimeWindowPolicy) -> ArrivalPlan:
    rng = random.Random(spec.seed)
    n = spec.students
    students = []
    for i in range(n):
        students.append((
            rng.choice(GIVEN_NAMES),
            f"{rng.choice(FAMILY_NAMES)} {rng.choice(FAMILY_NAMES)}",
            rng.randrange(1, 6),
            rng.choice("AB"),
        ))
    uids: list[str] = []
    seen = set()
    while len(uids) < n:
        uid = f"{rng.getrandbits(32):08X}"
        if uid not in seen:
            seen.add(uid)
            uids.append(uid)

    order = list(range(n))
    rng.shuffle(order)
    blocked = set(order[: n * 2 // 100])
    rest = order[len(blocked):]
    absent = set(rest[: n * 5 // 100])
    rest = rest[len(absent):]
    post_closure = set(rest[: n * 3 // 100])
    rest = rest[len(post_closure):]
    late = set(rest[: n * 12 // 100])
    normal = set(rest[len(late):])

    tz = policy.tz

    def at(clk: time, micro: int) -> datetime:
        return datetime.combine(spec.day, clk.replace(microsecond=micro), tzinfo=tz)

    def rand_dt(start: time, end: time) -> datetime:
        s0 = start.hour * 3600 + start.minute * 60 + start.second
        s1 = end.hour * 3600 + end.minute * 60 + end.second
        s = rng.randrange(s0, s1 + 1)
        return at(time(s // 3600, (s // 60) % 60, s % 60), rng.randrange(1_000_000))

    scans: list[PlannedScan] = []

    def add(instant: datetime, uid: str) -> None:
        scans.append(PlannedScan(at=instant, reader=rng.randrange(spec.readers or 1),
                                 uid=uid))

    if spec.arrival_profile == "compressed":
        for i in sorted(normal | blocked | late | post_closure):
            add(rand_dt(time(7, 0, 0), time(7, 59, 59)), uids[i])
        dup_candidates = sorted((normal | late) - blocked)
        for i in dup_candidates[: len(dup_candidates) * 10 // 100]:
            add(rand_dt(time(7, 0, 0), time(7, 59, 59)), uids[i])
    else:
        for i in sorted(normal | blocked):
            add(rand_dt(time(7, 0, 0), time(7, 58, 0)), uids[i])
        for i in sorted(late):
            add(rand_dt(time(8, 1, 0), time(8, 29, 0)), uids[i])
        for i in sorted(post_closure):
            add(rand_dt(time(8, 31, 30), time(8, 40, 0)), uids[i])
        # a few students try before the window opens, then arrive properly
        early = sorted(normal)[: max(0, n * 2 // 100)]
        for i in early:
            add(rand_dt(time(6, 55, 0), time(6, 59, 59)), uids[i])
        # re-scans inside the window produce duplicate acks
        dup_candidates = sorted((normal | late) - blocked)
        for i in dup_candidates[: len(dup_candidates) * 10 // 100]:
            add(rand_dt(time(8, 0, 0), time(8, 29, 59)), uids[i])
    # unknown credentials
    unknown_uids = set()
    for _ in range(max(1, n * 2 // 100) if n else 0):
        uid = f"{rng.getrandbits(32):08X}"
        if uid in seen:
            continue
        unknown_uids.add(uid)
        add(rand_dt(time(7, 5, 0), time(8, 25, 0)), uid)

    scans.sort(key=lambda s: (s.at, s.uid))
    return ArrivalPlan(students=students, uids=uids, blocked=blocked, absent=absent,
                       scans=scans, unknown_uids=unknown_uids)


def predict_replies(plan: ArrivalPlan, policy: TimeWindowPolicy) -> list[str]:
    """Mirror of the scan path, computed directly from the plan."""
    owner = plan.uid_owner
    recorded: set[int] = set()
    replies = []
    for scan in plan.scans:
        if scan.uid not in owner:
            replies.append("NAK UNK")
            continue
        idx = owner[scan.uid]
        if idx in plan.blocked:
            replies.append("NAK BLK")
            continue
        if not policy.is_school_day(scan.at.astimezone(policy.tz).date()):
            replies.append("NAK DAY")
            continue
        cls = classify(policy, scan.at.astimezone(policy.tz).time())
        if cls is Classification.BEFORE_WINDOW:
            replies.append("NAK WIN")
        elif cls is Classification.AFTER_CLOSURE:
            replies.append("NAK CLO")
        elif idx in recorded:
            replies.append("ACK D")
        else:
            recorded.add(idx)
            replies.append("ACK P" if cls is Classification.PRESENT else "ACK L")
    return replies


def oracle_final_status(plan: ArrivalPlan, policy: TimeWindowPolicy) -> dict[int, Status]:
    """Earliest accepted scan fixes the status; everyone else is absent."""
    owner = plan.uid_owner
    expected: dict[int, Status] = {}
    for scan in plan.scans:
        idx = owner.get(scan.uid)
        if idx is None or idx in plan.blocked or idx in expected:
            continue
        if not policy.is_school_day(scan.at.astimezone(policy.tz).date()):
            continue
        cls = classify(policy, scan.at.astimezone(policy.tz).time())
        if cls is Classification.PRESENT:
            expected[idx] = Status.PRESENT
        elif cls is Classification.LATE:
            expected[idx] = Status.LATE
    for idx in range(len(plan.uids)):
        if idx not in expected:
            expected[idx] = Status.ABSENT
    return expected


class MorningSimulation:
    def __init__(self, spec: SimulationSpec):
        self.spec = spec
        weekdays = frozenset(set(range(5)) | {spec.day.weekday()})
        self.policy = TimeWindowPolicy(school_weekdays=weekdays)
        self.plan = build_plan(spec, self.policy)

    # -- orchestration ------------------------------------------------------------

    def run(self) -> SimulationResult:
        spec = self.spec
        policy = self.policy
        tz = policy.tz
        start_at = datetime.combine(spec.day, time(6, 50, 0), tzinfo=tz)
        vclock = VirtualClock(start_at, auto_advance=False)

        with tempfile.TemporaryDirectory(prefix="rollcall-sim-") as workdir:
            central_store = CentralStore(f"{workdir}/central.db", vclock)
            central_store.create_actor(ADMIN_USER, ADMIN_PASSWORD, Role.ADMIN,
                                       actor="bootstrap")
            central_store.register_node(NODE_ID, NODE_KEY)
            central = CentralService(central_store, policy, vclock)
            central.start()
            gate = GateProxy(("127.0.0.1", central.port))
            gate.start()
            edge = None
            readers: list[ReaderEmulator] = []
            try:
                admin = CentralClient(central.base_url())
                admin.login(ADMIN_USER, ADMIN_PASSWORD)
                code_by_index = self._provision_roster(admin)

                edge = EdgeNode({
                    "edge.node_id": NODE_ID,
                    "edge.store": f"{workdir}/edge.db",
                    "edge.listen": "127.0.0.1:0",
                    "edge.central_url": f"http://127.0.0.1:{gate.port}",
                    "edge.node_key": NODE_KEY,
                    "edge.sync_interval_s": str(spec.sync_interval_s),
                    "edge.sync_backoff_base_s": "5",
                    "edge.sync_backoff_cap_s": "300",
                    "policy.timezone": policy.tz_name,
                    "policy.school_days": "mon,tue,wed,thu,fri,sat,sun",
                }, vclock)
                edge.start()
                self._await_replica(edge, central_store)

                readers = [ReaderEmulator(("127.0.0.1", edge.reader_port),
                                          node_id=f"sim-reader-{k}")
                           for k in range(max(1, spec.readers))]
                for reader in readers:
                    reader.handshake()

                replies = self._run_morning(vclock, edge, readers, gate)
                self._drain(vclock, edge, central_store, gate)
                result = self._verify(admin, edge, central_store, code_by_index, replies)
                result.latencies_ms = sorted(
                    rtt for reader in readers for rtt in reader.rtts_ms)
                result.sync_failures = edge.sync_worker.failures
                return result
            finally:
                for reader in readers:
                    reader.close()
                if edge is not None:
                    edge.stop()
                gate.stop()
                central.stop()
                central_store.close()
                vclock.close()

    def _provision_roster(self, admin: CentralClient) -> dict[int, str]:
        code_by_index: dict[int, str] = {}
        for i, (given, family, grade, section) in enumerate(self.plan.students):
            student = admin.create_student(given, family, self.spec.day.year,
                                           grade, section)
            code_by_index[i] = student["student_code"]
            admin.enroll_card(self.plan.uids[i], student["student_code"])
        for i in sorted(self.plan.blocked):
            admin.set_card_state(self.plan.uids[i], "blocked")
        return code_by_index

    def _await_replica(self, edge: EdgeNode, central_store: CentralStore,
                       timeout_s: float = 30.0) -> None:
        deadline = _time.monotonic() + timeout_s
        target = central_store.roster_version()
        while _time.monotonic() < deadline:
            if edge.store.roster_version() >= target:
                return
            _time.sleep(0.02)
        raise TimeoutError("edge replica did not catch up with central roster")

    def _partition_bounds(self) -> tuple[datetime | None, datetime | None]:
        if self.spec.partition is None:
            return None, None
        tz = self.policy.tz
        frm, to = self.spec.partition
        return (datetime.combine(self.spec.day, frm, tzinfo=tz),
                datetime.combine(self.spec.day, to, tzinfo=tz))

    def _run_morning(self, vclock: VirtualClock, edge: EdgeNode,
                     readers: list[ReaderEmulator], gate: GateProxy) -> list[str]:
        spec = self.spec
        part_from, part_to = self._partition_bounds()
        replies: list[str] = []

        def advance_to(instant: datetime) -> None:
            now = vclock.now()
            if part_from is not None and now < part_from <= instant and gate.connected:
                gate.set_connected(False)
            if part_to is not None and now < part_to <= instant and not gate.connected:
                gate.set_connected(True)
            gap = (instant - now).total_seconds()
            if gap > 0 and spec.speed > 0:
                _time.sleep(min(gap, MAX_PACED_GAP_S) / spec.speed)
            vclock.advance_to(instant)

        for scan in self.plan.scans:
            advance_to(scan.at)
            replies.append(readers[scan.reader % len(readers)].scan(scan.uid))

        # past closure, wait for the edge's scheduler to run the day
        end = datetime.combine(spec.day, time(8, 45, 0), tzinfo=self.policy.tz)
        advance_to(max(end, vclock.now()))
        deadline = _time.monotonic() + 15
        while not edge.store.closure_ran(spec.day):
            if _time.monotonic() > deadline:
                raise TimeoutError("closure did not run")
            _time.sleep(0.02)
        return replies

    def _drain(self, vclock: VirtualClock, edge: EdgeNode,
               central_store: CentralStore, gate: GateProxy,
               timeout_s: float = 90.0) -> None:
        if not gate.connected:
            gate.set_connected(True)
        deadline = _time.monotonic() + timeout_s
        while _time.monotonic() < deadline:
            pending = edge.store.pending_batch(1)
            if pending is None and \
                    central_store.node_high_water(NODE_ID) == edge.store.max_sequence():
                return
            # nudge virtual time so sync retries and interval sleeps fire
            vclock.advance(max(10.0, self.spec.sync_interval_s))
            _time.sleep(0.02)
        raise TimeoutError("sync did not drain after reconnect")

    # -- verification ----------------------------------------------------------------

    def _verify(self, admin: CentralClient, edge: EdgeNode,
                central_store: CentralStore, code_by_index: dict[int, str],
                replies: list[str]) -> SimulationResult:
        spec, plan, policy = self.spec, self.plan, self.policy
        mismatches: list[str] = []

        predicted = predict_replies(plan, policy)
        reply_mismatches = sum(1 for got, want in zip(replies, predicted) if got != want)
        if len(replies) != len(predicted) or reply_mismatches:
            mismatches.append(f"replies diverged from plan ({reply_mismatches})")

        expected = {code_by_index[i]: status
                    for i, status in oracle_final_status(plan, policy).items()}

        got: dict[str, str] = {}
        page = 1
        while True:
            chunk = admin.query_attendance(spec.day, spec.day, page=page, page_size=500)
            for ev in chunk["events"]:
                got[ev["student_code"]] = ev["status"]
            if page * 500 >= chunk["total"]:
                break
            page += 1

        status_mismatches = 0
        for code, status in expected.items():
            if got.get(code) != status.value:
                status_mismatches += 1
        status_mismatches += sum(1 for code in got if code not in expected)
        if status_mismatches:
            mismatches.append(f"final status diverged from oracle ({status_mismatches})")

        counts = {s.value: 0 for s in Status}
        for status in got.values():
            counts[status] += 1
        conservation_ok = sum(counts.values()) == spec.students
        if not conservation_ok:
            mismatches.append("conservation violated")

        edge_ids = {ev.event_id for ev in edge.store.iter_log()}
        central_ids = central_store.all_event_ids()
        ids_ok = edge_ids == central_ids and len(edge.store.iter_log()) == len(edge_ids)
        if not ids_ok:
            mismatches.append(
                f"event ids differ (edge {len(edge_ids)}, central {len(central_ids)})")

        audit_scans = len(edge.store.audit_entries(AuditAction.SCAN))
        audit_ok = audit_scans == len(plan.scans)
        if not audit_ok:
            mismatches.append(f"audit scans {audit_scans} != frames {len(plan.scans)}")

        reply_counts: dict[str, int] = {}
        for r in predicted:
            reply_counts[r] = reply_counts.get(r, 0) + 1

        part_desc = "none"
        if spec.partition is not None:
            part_desc = (f"{spec.partition[0].strftime('%H:%M')}.."
                         f"{spec.partition[1].strftime('%H:%M')}")

        lines = [
            "conformance-report",
            f"config students={spec.students} readers={spec.readers} "
            f"day={spec.day.isoformat()} seed={spec.seed} partition={part_desc}",
            f"plan scans={len(plan.scans)} blocked-students={len(plan.blocked)} "
            f"no-shows={len(plan.absent)} unknown-uids={len(plan.unknown_uids)}",
            "replies " + " ".join(
                f"{name.lower().replace(' ', '-')}={reply_counts.get(name, 0)}"
                for name in ("ACK P", "ACK L", "ACK D", "NAK WIN", "NAK CLO",
                             "NAK BLK", "NAK UNK", "NAK DAY")),
            f"replies-match-plan={'OK' if not reply_mismatches else f'MISMATCH {reply_mismatches}'}",
            f"central present={counts['present']} late={counts['late']} "
            f"absent={counts['absent']} justified={counts['justified']} "
            f"total={sum(counts.values())}",
            f"conservation={'OK' if conservation_ok else 'FAIL'}",
            f"status-oracle={'OK' if not status_mismatches else f'MISMATCH {status_mismatches}'}",
            f"event-ids-exactly-once={'OK' if ids_ok else 'FAIL'}",
            f"audit-scan-parity={'OK' if audit_ok else 'FAIL'}",
            f"result {'PASS' if not mismatches else 'FAIL'}",
        ]
        return SimulationResult(ok=not mismatches, report="\n".join(lines) + "\n",
                                central_counts=counts, mismatches=mismatches)


def parse_partition(raw: str) -> tuple[time, time]:
    frm, _, to = raw.partition("..")
    if not to:
        raise ValueError("partition must be HH:MM..HH:MM")
    return time.fromisoformat(frm), time.fromisoformat(to)
