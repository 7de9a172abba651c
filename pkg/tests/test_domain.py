"""Domain types, student-code generation, and the card lifecycle."""

from __future__ import annotations

import re
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rollcall.domain import (
    STUDENT_CODE_RE,
    AttendanceEvent,
    CardState,
    Method,
    RfidCard,
    Status,
    StudentRecord,
    generate_student_code,
    new_event_id,
    normalize_uid,
    plan_enrollment,
    prefer_event,
)
from rollcall.errors import (
    CapacityExhausted,
    DuplicateUid,
    InvalidGradeOrSection,
    MalformedUid,
    UnknownStudent,
)

NOW = datetime(2025, 8, 4, 12, 0, 0, tzinfo=timezone.utc)


def oracle_next_code(year: int, grade: int, section: str, roster: set[str]) -> str:
    """Independent min-free-integer oracle: full enumeration over the prefix."""
    prefix = f"{year:04d}-{grade}{section}-"
    taken = {c for c in roster if c.startswith(prefix)}
    candidates = [f"{prefix}{n:03d}" for n in range(1, 1000)]
    free = [c for c in candidates if c not in taken]
    if not free:
        raise CapacityExhausted(prefix)
    return free[0]


class TestStudentCodeGeneration:
    def test_empty_roster(self):
        assert generate_student_code(2025, 1, "A", set()) == "2025-1A-001"

    def test_next_free_sequential(self):
        roster = {"2025-1A-001", "2025-1A-002"}
        assert generate_student_code(2025, 1, "A", roster) == "2025-1A-003"

    def test_prefix_isolation(self):
        roster = {f"2025-1A-{n:03d}" for n in range(1, 11)}
        expected = oracle_next_code(2025, 3, "B", roster)
        assert expected == "2025-3B-001"
        assert generate_student_code(2025, 3, "B", roster) == expected

    def test_fills_gaps(self):
        roster = {"2025-1A-001", "2025-1A-003"}
        assert generate_student_code(2025, 1, "A", roster) == "2025-1A-002"

    def test_capacity_exhausted(self):
        roster = {f"2025-1A-{n:03d}" for n in range(1, 1000)}
        with pytest.raises(CapacityExhausted):
            generate_student_code(2025, 1, "A", roster)

    @pytest.mark.parametrize("year,grade,section", [
        (2025, 0, "A"), (2025, 6, "A"), (2025, 1, "a"),
        (2025, 1, "AA"), (999, 1, "A"), (10000, 1, "A"),
    ])
    def test_invalid_inputs(self, year, grade, section):
        with pytest.raises(InvalidGradeOrSection):
            generate_student_code(year, grade, section, set())

    @given(
        existing=st.sets(
            st.tuples(st.integers(1, 5), st.sampled_from("AB"), st.integers(1, 30)),
            max_size=40,
        ),
        grade=st.integers(1, 5),
        section=st.sampled_from("AB"),
    )
    @settings(max_examples=200)
    def test_closure_property(self, existing, grade, section):
        roster = {f"2025-{g}{s}-{n:03d}" for g, s, n in existing}
        code = generate_student_code(2025, grade, section, roster)
        assert code not in roster
        assert STUDENT_CODE_RE.match(code)
        assert code == oracle_next_code(2025, grade, section, roster)


class TestUidNormalization:
    def test_canonical_forms(self):
        assert normalize_uid("04a1b2c3") == "04A1B2C3"
        assert normalize_uid("04:A1:B2:C3") == "04A1B2C3"
        assert normalize_uid(" 04A1B2C3 ") == "04A1B2C3"

    @pytest.mark.parametrize("raw", ["", "04A1B2", "04A1B2C3D4", "NOTHEXXX", "04 A1"])
    def test_malformed(self, raw):
        with pytest.raises(MalformedUid):
            normalize_uid(raw)


def _student(code="2025-1A-001", active=True):
    return StudentRecord(
        student_code=code, given_names="Ana", family_names="Quispe",
        enrollment_year=int(code[:4]), grade=int(code[5]), section=code[6],
        active=active,
    )


def _card(uid, student, state=CardState.ACTIVE):
    return RfidCard(uid=uid, state=state, linked_student=student, issued_at=NOW)


class TestCardLifecycle:
    def test_fresh_enrollment(self):
        students = {"2025-1A-001": _student()}
        changes = plan_enrollment("04A1B2C3", "2025-1A-001", {}, students, NOW)
        assert len(changes) == 1
        card = changes[0]
        assert card.state is CardState.ACTIVE
        assert card.linked_student == "2025-1A-001"

    def test_idempotent_reenroll(self):
        students = {"2025-1A-001": _student()}
        existing = _card("04A1B2C3", "2025-1A-001")
        changes = plan_enrollment("04A1B2C3", "2025-1A-001",
                                  {"04A1B2C3": existing}, students, NOW)
        assert changes == [existing]

    def test_duplicate_uid_rejected(self):
        students = {"2025-1A-001": _student(), "2025-1A-002": _student("2025-1A-002")}
        cards = {"04A1B2C3": _card("04A1B2C3", "2025-1A-001")}
        with pytest.raises(DuplicateUid):
            plan_enrollment("04A1B2C3", "2025-1A-002", cards, students, NOW)

    def test_reenrollment_blocks_previous_card(self):
        students = {"2025-1A-001": _student()}
        cards = {"04A1B2C3": _card("04A1B2C3", "2025-1A-001")}
        changes = plan_enrollment("AABBCCDD", "2025-1A-001", cards, students, NOW)
        by_uid = {c.uid: c for c in changes}
        assert by_uid["04A1B2C3"].state is CardState.BLOCKED
        assert by_uid["AABBCCDD"].state is CardState.ACTIVE
        assert by_uid["AABBCCDD"].linked_student == "2025-1A-001"

    def test_unknown_or_inactive_student(self):
        with pytest.raises(UnknownStudent):
            plan_enrollment("04A1B2C3", "2025-1A-009", {}, {}, NOW)
        students = {"2025-1A-001": _student(active=False)}
        with pytest.raises(UnknownStudent):
            plan_enrollment("04A1B2C3", "2025-1A-001", {}, students, NOW)

    def test_blocked_uid_of_other_student_can_be_reissued(self):
        # a returned card may be re-linked once it is no longer active
        students = {"2025-1A-002": _student("2025-1A-002")}
        cards = {"04A1B2C3": _card("04A1B2C3", "2025-1A-001", state=CardState.BLOCKED)}
        changes = plan_enrollment("04A1B2C3", "2025-1A-002", cards, students, NOW)
        by_uid = {c.uid: c for c in changes}
        assert by_uid["04A1B2C3"].state is CardState.ACTIVE
        assert by_uid["04A1B2C3"].linked_student == "2025-1A-002"

    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2)), max_size=25))
    @settings(max_examples=100)
    def test_no_two_active_cards_share_uid_or_student(self, ops):
        """After any enroll sequence: uid -> at most one card; student -> at most one active."""
        students = {f"2025-1A-{n:03d}": _student(f"2025-1A-{n:03d}") for n in range(1, 4)}
        cards: dict[str, RfidCard] = {}
        for uid_i, student_i in ops:
            uid = f"{uid_i:08X}"
            code = f"2025-1A-{student_i + 1:03d}"
            try:
                for card in plan_enrollment(uid, code, cards, students, NOW):
                    cards[card.uid] = card
            except DuplicateUid:
                pass
        active_by_student = {}
        for card in cards.values():
            if card.state is CardState.ACTIVE and card.linked_student:
                assert card.linked_student not in active_by_student, "two active cards for one student"
                active_by_student[card.linked_student] = card.uid


class TestEventConstraints:
    def test_rfid_status_restriction(self):
        with pytest.raises(ValueError):
            AttendanceEvent(new_event_id(), 1, "2025-1A-001", NOW.date(),
                            Status.ABSENT, NOW, Method.RFID)

    def test_closure_is_absent(self):
        with pytest.raises(ValueError):
            AttendanceEvent(new_event_id(), 1, "2025-1A-001", NOW.date(),
                            Status.PRESENT, NOW, Method.SYSTEM_CLOSURE)

    def test_justified_requires_manual(self):
        with pytest.raises(ValueError):
            AttendanceEvent(new_event_id(), 1, "2025-1A-001", NOW.date(),
                            Status.JUSTIFIED, NOW, Method.RFID)

    def test_manual_requires_actor(self):
        with pytest.raises(ValueError):
            AttendanceEvent(new_event_id(), 1, "2025-1A-001", NOW.date(),
                            Status.PRESENT, NOW, Method.MANUAL)

    def test_code_field_consistency_enforced(self):
        with pytest.raises(InvalidGradeOrSection):
            StudentRecord(student_code="2025-1A-001", given_names="x", family_names="y",
                          enrollment_year=2024, grade=1, section="A")

    def test_event_id_is_128_bit_hex(self):
        eid = new_event_id()
        assert re.fullmatch(r"[0-9a-f]{32}", eid)
        assert new_event_id() != eid


class TestConflictRule:
    def _ev(self, eid, version=1, recorded="12:00:00", status=Status.PRESENT,
            method=Method.RFID, by=None):
        return AttendanceEvent(
            event_id=eid, version=version, student_code="2025-1A-001",
            school_day=NOW.date(), status=status,
            recorded_at=NOW.replace(hour=int(recorded[:2]), minute=int(recorded[3:5]),
                                    second=int(recorded[6:8])),
            method=method, recorded_by=by,
        )

    def test_same_lineage_higher_version_wins(self):
        v1 = self._ev("a" * 32)
        v2 = self._ev("a" * 32, version=2, status=Status.LATE)
        assert prefer_event(v1, v2) is v2
        assert prefer_event(v2, v1) is v2

    def test_different_lineage_earliest_wins(self):
        early = self._ev("b" * 32, recorded="07:10:00")
        late = self._ev("c" * 32, recorded="10:00:00", status=Status.PRESENT,
                        method=Method.MANUAL, by="admin")
        assert prefer_event(early, late) is early
        assert prefer_event(late, early) is early

    def test_tie_breaks_on_event_id(self):
        a = self._ev("a" * 32)
        b = self._ev("b" * 32)
        assert prefer_event(a, b) is a
        assert prefer_event(b, a) is a
