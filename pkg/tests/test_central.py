"""Central service: RBAC matrix, auth, manual marking, queries, live feed, sync."""

from __future__ import annotations

import random
import threading
from datetime import date, timedelta

import pytest

from conftest import SCHOOL_DAY, local_dt
from rollcall.apiclient import ApiRequestError, CentralClient
from rollcall.domain import AttendanceEvent, Method, Status, new_event_id
from rollcall.rbac import ALL_ROUTE_KEYS, NODE_ROUTES, PERMISSIONS, PUBLIC_ROUTES, Role
from rollcall.syncproto import SyncBatch, SyncClient, event_to_wire


def make_students(admin, n=4, grade=1, section="A"):
    return [admin.create_student(f"G{i}", f"F{i}", 2025, grade, section)["student_code"]
            for i in range(n)]


def login_as(central, admin, username, role, **kwargs):
    admin.create_actor(username, "pw-" + username, role, **kwargs)
    client = CentralClient(central.base_url())
    client.login(username, "pw-" + username)
    return client


# -- RBAC ------------------------------------------------------------------------

# per-route probe requests used by the matrix enumeration test
PROBES = {
    "students.list":      ("GET", "/api/v1/students", {}),
    "students.create":    ("POST", "/api/v1/students", {"json": {
        "given_names": "P", "family_names": "Q", "enrollment_year": 2025,
        "grade": 2, "section": "B"}}),
    "students.update":    ("PATCH", "/api/v1/students/2025-9Z-999", {"json": {"active": True}}),
    "cards.list":         ("GET", "/api/v1/cards", {}),
    "cards.enroll":       ("POST", "/api/v1/cards", {"json": {
        "uid": "0BADF00D", "student_code": "2025-9Z-999"}}),
    "cards.set_state":    ("POST", "/api/v1/cards/0BADF00D/state", {"json": {"state": "blocked"}}),
    "attendance.query":   ("GET", "/api/v1/attendance", {}),
    "attendance.mark":    ("POST", "/api/v1/attendance/mark", {"json": {
        "student_code": "2025-9Z-999", "day": "2025-08-04", "status": "present"}}),
    "attendance.justify": ("POST", "/api/v1/attendance/justify", {"json": {
        "student_code": "2025-9Z-999", "day": "2025-08-04"}}),
    "attendance.live":    ("GET", "/api/v1/attendance/live", {"params": {"timeout": 0}}),
    "reports.summary":    ("GET", "/api/v1/reports/summary", {"params": {
        "period": "day", "anchor": "2025-08-04"}}),
    "reports.export":     ("GET", "/api/v1/reports/export.csv", {}),
    "actors.create":      ("POST", "/api/v1/actors", {"json": {
        "username": "probe-user", "password": "x", "role": "student"}}),
    "audit.list":         ("GET", "/api/v1/audit", {}),
}


class TestPermissionMatrix:
    def test_every_route_is_declared(self, central):
        """Deny-by-default: the router exposes no key outside the matrix."""
        route_keys = {r.route_key for r in central.router.routes}
        assert route_keys == ALL_ROUTE_KEYS
        assert set(PROBES) == set(PERMISSIONS)

    def test_full_matrix_enumeration(self, central, admin):
        """4 roles x every user endpoint == the declared table."""
        clients = {
            Role.ADMIN: admin,
            Role.AUXILIARY: login_as(central, admin, "aux1", "auxiliary"),
            Role.TEACHER: login_as(central, admin, "teach1", "teacher",
                                   scopes=[{"grade": 1, "section": "A"}]),
            Role.STUDENT: login_as(central, admin, "stud1", "student",
                                   student_code="2025-1A-001"),
        }
        for route_key, (method, path, kwargs) in PROBES.items():
            for role, client in clients.items():
                try:
                    client.request(method, path, **kwargs)
                    outcome = "allowed"
                except ApiRequestError as exc:
                    outcome = "denied" if exc.status == 403 else "allowed"
                expected = "allowed" if role in PERMISSIONS[route_key] else "denied"
                assert outcome == expected, f"{role.value} on {route_key}: {outcome}"

    def test_anonymous_gets_401(self, central):
        client = CentralClient(central.base_url())
        with pytest.raises(ApiRequestError) as err:
            client.list_students()
        assert err.value.status == 401

    def test_node_routes_reject_user_tokens(self, central, admin):
        with pytest.raises(ApiRequestError) as err:
            admin.get("/api/v1/sync/roster", params={"since": 0})
        assert err.value.status == 403

    def test_denials_are_audited(self, central, admin):
        teacher = login_as(central, admin, "t-denied", "teacher")
        with pytest.raises(ApiRequestError):
            teacher.set_card_state("0BADF00D", "blocked")
        denies = admin.audit_entries(action="deny")
        assert any(e["actor"] == "t-denied" and e["subject"] == "cards.set_state"
                   for e in denies)


class TestAuth:
    def test_login_and_token_roundtrip(self, central, admin):
        assert admin.list_students() == []

    def test_bad_password_audited(self, central, admin):
        client = CentralClient(central.base_url())
        with pytest.raises(ApiRequestError) as err:
            client.login("admin", "wrong")
        assert err.value.status == 401
        fails = admin.audit_entries(action="login_fail")
        assert any(e["subject"] == "admin" for e in fails)

    def test_login_rate_limited_after_five_failures(self, central, vclock):
        client = CentralClient(central.base_url())
        for _ in range(5):
            with pytest.raises(ApiRequestError) as err:
                client.login("admin", "wrong")
            assert err.value.status == 401
        with pytest.raises(ApiRequestError) as err:
            client.login("admin", "wrong")
        assert err.value.status == 429
        # the window slides with the (virtual) clock
        vclock.advance(61)
        with pytest.raises(ApiRequestError) as err:
            client.login("admin", "wrong")
        assert err.value.status == 401

    def test_token_expiry(self, central, admin, vclock):
        token, _ = central.store.issue_token("user", "admin", ttl_s=10)
        short = CentralClient(central.base_url(), token=token)
        assert short.list_students() == []
        vclock.advance(11)
        with pytest.raises(ApiRequestError) as err:
            short.list_students()
        assert err.value.status == 401


class TestRosterManagement:
    def test_student_codes_generated_sequentially(self, admin):
        codes = make_students(admin, 3)
        assert codes == ["2025-1A-001", "2025-1A-002", "2025-1A-003"]

    def test_card_enroll_block_unblock(self, admin):
        codes = make_students(admin, 2)
        card = admin.enroll_card("04A1B2C3", codes[0])
        assert card["state"] == "active"
        with pytest.raises(ApiRequestError) as err:
            admin.enroll_card("04A1B2C3", codes[1])
        assert err.value.code == "duplicate_uid"
        blocked = admin.set_card_state("04A1B2C3", "blocked")
        assert blocked["state"] == "blocked"
        again = admin.set_card_state("04A1B2C3", "blocked")  # idempotent
        assert again["state"] == "blocked"

    def test_deactivating_student_blocks_card(self, admin):
        codes = make_students(admin, 1)
        admin.enroll_card("04A1B2C3", codes[0])
        admin.set_student_active(codes[0], False)
        cards = {c["uid"]: c for c in admin.list_cards()}
        assert cards["04A1B2C3"]["state"] == "blocked"

    def test_teacher_sees_only_assigned_sections(self, central, admin):
        make_students(admin, 2, grade=1, section="A")
        make_students(admin, 3, grade=2, section="B")
        teacher = login_as(central, admin, "t2", "teacher",
                           scopes=[{"grade": 2, "section": "B"}])
        students = teacher.list_students()
        assert len(students) == 3
        assert all(s["grade"] == 2 and s["section"] == "B" for s in students)
        with pytest.raises(ApiRequestError) as err:
            teacher.list_students(grade=1, section="A")
        assert err.value.status == 403


class TestManualMarking:
    def test_mark_creates_then_supersedes(self, admin, vclock):
        codes = make_students(admin, 1)
        ev = admin.manual_mark(codes[0], SCHOOL_DAY, "absent", note="sick")
        assert ev["version"] == 1 and ev["method"] == "manual"
        ev2 = admin.manual_mark(codes[0], SCHOOL_DAY, "present", note="actually here")
        assert ev2["version"] == 2 and ev2["event_id"] == ev["event_id"]
        assert ev2["recorded_at"] == ev["recorded_at"]  # lineage keeps its timestamp
        marks = admin.audit_entries(action="manual_mark")
        assert len(marks) == 2

    def test_future_date_rejected(self, admin):
        codes = make_students(admin, 1)
        with pytest.raises(ApiRequestError) as err:
            admin.manual_mark(codes[0], SCHOOL_DAY + timedelta(days=2), "present")
        assert err.value.code == "future_date"

    def test_justify_requires_absent(self, admin):
        codes = make_students(admin, 2)
        admin.manual_mark(codes[0], SCHOOL_DAY, "absent")
        justified = admin.justify(codes[0], SCHOOL_DAY, note="medical")
        assert justified["status"] == "justified" and justified["version"] == 2
        admin.manual_mark(codes[1], SCHOOL_DAY, "present")
        with pytest.raises(ApiRequestError) as err:
            admin.justify(codes[1], SCHOOL_DAY)
        assert err.value.code == "not_absent"


class TestQueries:
    def _seed_events(self, admin, rng: random.Random):
        codes = []
        for grade, section, n in ((1, "A", 4), (1, "B", 3), (2, "A", 3)):
            codes.extend(make_students(admin, n, grade=grade, section=section))
        days = [SCHOOL_DAY - timedelta(days=1), SCHOOL_DAY]
        statuses = ["present", "late", "absent"]
        marked = []
        for day in days:
            for code in codes:
                if rng.random() < 0.8:
                    status = rng.choice(statuses)
                    admin.manual_mark(code, day, status)
                    marked.append((day, code, status))
        return codes, days, marked

    def test_random_filters_match_reference(self, admin):
        rng = random.Random(5)
        codes, days, marked = self._seed_events(admin, rng)

        def reference(date_from, date_to, grade=None, section=None, status=None):
            rows = []
            for day, code, st in marked:
                if not (date_from <= day <= date_to):
                    continue
                g, sec = int(code[5]), code[6]
                if grade is not None and g != grade:
                    continue
                if section is not None and sec != section:
                    continue
                if status is not None and st != status:
                    continue
                rows.append((day.isoformat(), code, st))
            return sorted(rows)

        for _ in range(25):
            grade = rng.choice([None, 1, 2])
            section = rng.choice([None, "A", "B"])
            status = rng.choice([None, "present", "late", "absent"])
            got = admin.query_attendance(days[0], days[-1], grade=grade,
                                         section=section, status=status, page_size=1000)
            got_rows = sorted((e["school_day"], e["student_code"], e["status"])
                              for e in got["events"])
            expected = reference(days[0], days[-1], grade, section, status)
            assert got_rows == expected
            assert got["total"] == len(expected)
            agg = got["aggregates"]
            for s in ("present", "late", "absent"):
                assert agg[s] == sum(1 for r in expected if r[2] == s)

    def test_pagination_concatenates_to_full_result(self, admin):
        rng = random.Random(6)
        codes, days, marked = self._seed_events(admin, rng)
        full = admin.query_attendance(days[0], days[-1], page_size=1000)
        paged = []
        page = 1
        while True:
            chunk = admin.query_attendance(days[0], days[-1], page=page, page_size=3)
            paged.extend(chunk["events"])
            assert chunk["aggregates"] == full["aggregates"]  # pagination-independent
            if page * 3 >= chunk["total"]:
                break
            page += 1
        assert [e["event_id"] for e in paged] == [e["event_id"] for e in full["events"]]
        # stable ordering: (day, student_code)
        keys = [(e["school_day"], e["student_code"]) for e in full["events"]]
        assert keys == sorted(keys)

    def test_invalid_range(self, admin):
        with pytest.raises(ApiRequestError) as err:
            admin.query_attendance(SCHOOL_DAY, SCHOOL_DAY - timedelta(days=1))
        assert err.value.code == "invalid_range"

    def test_student_sees_own_history_only(self, central, admin):
        codes = make_students(admin, 2)
        admin.manual_mark(codes[0], SCHOOL_DAY, "present")
        admin.manual_mark(codes[1], SCHOOL_DAY, "late")
        student = login_as(central, admin, "s1", "student", student_code=codes[0])
        got = student.query_attendance(SCHOOL_DAY, SCHOOL_DAY)
        assert [e["student_code"] for e in got["events"]] == [codes[0]]
        with pytest.raises(ApiRequestError) as err:
            student.query_attendance(SCHOOL_DAY, SCHOOL_DAY, student=codes[1])
        assert err.value.status == 403


class TestLiveFeed:
    def test_scan_arrival_emits_once(self, central, admin):
        codes = make_students(admin, 1)
        first = admin.live_poll(SCHOOL_DAY, cursor=0, timeout_s=0)
        assert first["heartbeat"] is True

        results = {}

        def poll():
            results["poll"] = admin.live_poll(SCHOOL_DAY, cursor=first["cursor"],
                                              timeout_s=10)

        t = threading.Thread(target=poll)
        t.start()
        admin.manual_mark(codes[0], SCHOOL_DAY, "present")
        t.join(timeout=15)
        assert not t.is_alive()
        got = results["poll"]
        assert got["heartbeat"] is False
        assert [e["student_code"] for e in got["events"]] == [codes[0]]

        # reconnect with the new cursor: nothing repeats
        again = admin.live_poll(SCHOOL_DAY, cursor=got["cursor"], timeout_s=0)
        assert again["events"] == [] and again["heartbeat"] is True

    def test_cursor_replay_has_no_loss_or_dup(self, central, admin):
        codes = make_students(admin, 5)
        snapshot = admin.live_poll(SCHOOL_DAY, cursor=0, timeout_s=0)
        cursor = snapshot["cursor"]
        for code in codes:
            admin.manual_mark(code, SCHOOL_DAY, "present")
        seen = []
        while True:
            got = admin.live_poll(SCHOOL_DAY, cursor=cursor, timeout_s=0)
            if not got["events"]:
                break
            seen.extend(e["event_id"] for e in got["events"])
            cursor = got["cursor"]
        day_events = admin.query_attendance(SCHOOL_DAY, SCHOOL_DAY, page_size=100)["events"]
        assert sorted(seen) == sorted(e["event_id"] for e in day_events)

    def test_expired_cursor_410(self, central, admin):
        with pytest.raises(ApiRequestError) as err:
            admin.live_poll(SCHOOL_DAY, cursor=999999, timeout_s=0)
        assert err.value.status == 410


def _mk_event(code: str, seq: int, day=SCHOOL_DAY, at="07:10:00", status=Status.PRESENT,
              method=Method.RFID, by=None, event_id=None, version=1) -> AttendanceEvent:
    return AttendanceEvent(
        event_id=event_id or new_event_id(), version=version, student_code=code,
        school_day=day, status=status, recorded_at=local_dt(day, at), method=method,
        recorded_by=by, edge_sequence=seq)


class TestSyncEndpoints:
    def _node_client(self, central) -> SyncClient:
        return SyncClient(central.base_url(), "edge-1", "edgekey")

    def test_node_auth_and_push(self, central, admin):
        codes = make_students(admin, 3)
        client = self._node_client(central)
        events = [_mk_event(c, i + 1) for i, c in enumerate(codes)]
        batch = SyncBatch.build("edge-1", events)
        hw, dupes = client.push_events(batch)
        assert (hw, dupes) == (3, 0)
        assert central.store.node_high_water("edge-1") == 3

    def test_replay_is_idempotent(self, central, admin):
        codes = make_students(admin, 10)
        client = self._node_client(central)
        batch = SyncBatch.build("edge-1", [_mk_event(c, i + 1) for i, c in enumerate(codes)])
        client.push_events(batch)
        before = {(e.event_id, e.version, e.status) for e in central.store.events_for_day(SCHOOL_DAY)}
        hw, dupes = client.push_events(batch)
        assert hw == 10 and dupes == 10
        after = {(e.event_id, e.version, e.status) for e in central.store.events_for_day(SCHOOL_DAY)}
        assert before == after

    def test_bad_node_key_rejected(self, central):
        from rollcall.errors import AuthExpired
        client = SyncClient(central.base_url(), "edge-1", "wrong-key")
        with pytest.raises(AuthExpired):
            client.authenticate()

    def test_checksum_mismatch_rejected(self, central, admin):
        from rollcall.errors import ChecksumMismatch
        codes = make_students(admin, 1)
        client = self._node_client(central)
        batch = SyncBatch.build("edge-1", [_mk_event(codes[0], 1)])
        bad = SyncBatch(edge_node_id=batch.edge_node_id, events=batch.events,
                        first_sequence=1, last_sequence=1, checksum=batch.checksum ^ 0xFF)
        with pytest.raises(ChecksumMismatch):
            client.push_events(bad)
        assert central.store.node_high_water("edge-1") == 0

    def test_sequence_gap_reports_high_water(self, central, admin):
        from rollcall.errors import SequenceGap
        codes = make_students(admin, 3)
        client = self._node_client(central)
        client.push_events(SyncBatch.build("edge-1", [_mk_event(codes[0], 1)]))
        gap_batch = SyncBatch.build("edge-1", [_mk_event(codes[1], 3)])
        with pytest.raises(SequenceGap) as err:
            client.push_events(gap_batch)
        assert err.value.central_high_water == 1

    def test_token_bound_to_node(self, central, admin):
        central.store.register_node("edge-2", "otherkey")
        codes = make_students(admin, 1)
        client = SyncClient(central.base_url(), "edge-2", "otherkey")
        batch = SyncBatch.build("edge-1", [_mk_event(codes[0], 1)])
        with pytest.raises(Exception) as err:
            client.push_events(batch)
        assert "403" in str(err.value)

    def test_conflict_earliest_recorded_at_wins(self, central, admin, vclock):
        """Manual mark at central vs earlier RFID scan at the edge."""
        codes = make_students(admin, 1)
        vclock.advance_to(local_dt(SCHOOL_DAY, "10:00:00"))
        admin.manual_mark(codes[0], SCHOOL_DAY, "absent", note="looked absent")
        client = self._node_client(central)
        rfid = _mk_event(codes[0], 1, at="07:10:00")   # earlier than any manual mark
        hw, dupes = client.push_events(SyncBatch.build("edge-1", [rfid]))
        assert dupes == 0
        current = central.store.events_for_day(SCHOOL_DAY)
        assert len(current) == 1
        assert current[0].event_id == rfid.event_id
        assert current[0].status is Status.PRESENT
        # the losing manual record is in the audit trail, not silently gone
        assert any("conflict loser" in e.detail
                   for e in central.store.audit_entries())

    def test_conflict_later_edge_event_loses(self, central, admin, vclock):
        codes = make_students(admin, 1)
        vclock.advance_to(local_dt(SCHOOL_DAY, "07:00:00"))
        manual = admin.manual_mark(codes[0], SCHOOL_DAY, "present", note="no card today")
        client = self._node_client(central)
        rfid = _mk_event(codes[0], 1, at="08:10:00", status=Status.LATE)
        hw, dupes = client.push_events(SyncBatch.build("edge-1", [rfid]))
        assert dupes == 1  # deduplicated against the earlier manual record
        current = central.store.events_for_day(SCHOOL_DAY)
        assert current[0].event_id == manual["event_id"]

    def test_roster_pull_full_then_delta(self, central, admin):
        from rollcall.syncproto import SyncClient
        codes = make_students(admin, 2)
        admin.enroll_card("04A1B2C3", codes[0])
        client = self._node_client(central)
        full = client.pull_roster(0)
        assert {s.student_code for s in full.students} == set(codes)
        assert [c.uid for c in full.cards] == ["04A1B2C3"]
        assert full.policy["timezone"] == "America/Lima"
        empty = client.pull_roster(full.version)
        assert empty.students == [] and empty.cards == [] and empty.events == []
        # block a card: the next delta carries it
        admin.set_card_state("04A1B2C3", "blocked")
        delta = client.pull_roster(full.version)
        assert [c.uid for c in delta.cards] == ["04A1B2C3"]
        assert delta.cards[0].state.value == "blocked"

    def test_central_manual_marks_flow_to_edge_via_pull(self, central, admin):
        codes = make_students(admin, 1)
        base = self._node_client(central).pull_roster(0)
        admin.manual_mark(codes[0], SCHOOL_DAY, "present", note="manual")
        delta = self._node_client(central).pull_roster(base.version)
        assert len(delta.events) == 1
        assert delta.events[0].student_code == codes[0]
        assert delta.events[0].method is Method.MANUAL
