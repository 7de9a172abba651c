"""Shared fixtures: stores, policies, virtual clocks, and roster seeding."""

from __future__ import annotations

from datetime import date, datetime, time
from zoneinfo import ZoneInfo

import pytest

from rollcall.clock import VirtualClock
from rollcall.domain import CardState, RfidCard, StudentRecord, generate_student_code
from rollcall.edgestore import EdgeStore
from rollcall.engine import AttendanceEngine, TimeWindowPolicy

# a Monday, so the default Mon-Fri policy treats it as a school day
SCHOOL_DAY = date(2025, 8, 4)
assert SCHOOL_DAY.weekday() == 0

TZ = ZoneInfo("America/Lima")


def local_dt(day: date, clock_text: str) -> datetime:
    return datetime.combine(day, time.fromisoformat(clock_text), tzinfo=TZ)


@pytest.fixture
def policy() -> TimeWindowPolicy:
    return TimeWindowPolicy()


@pytest.fixture
def store(tmp_path):
    s = EdgeStore(str(tmp_path / "edge.db"), node_id="edge-1")
    yield s
    s.close()


@pytest.fixture
def vclock():
    return VirtualClock(local_dt(SCHOOL_DAY, "06:00:00"))


@pytest.fixture
def engine(store, policy, vclock):
    return AttendanceEngine(store, policy, vclock)


@pytest.fixture
def central(tmp_path, vclock):
    """Started central service with a bootstrapped admin and one registered node."""
    from rollcall.central import CentralService
    from rollcall.centralstore import CentralStore
    from rollcall.rbac import Role

    cstore = CentralStore(str(tmp_path / "central.db"), vclock)
    cstore.create_actor("admin", "adminpw", Role.ADMIN, actor="bootstrap")
    cstore.register_node("edge-1", "edgekey")
    service = CentralService(cstore, TimeWindowPolicy(), vclock)
    service.start()
    yield service
    service.stop()
    cstore.close()


@pytest.fixture
def admin(central):
    from rollcall.apiclient import CentralClient

    client = CentralClient(central.base_url())
    client.login("admin", "adminpw")
    return client


def seed_roster(store: EdgeStore, n: int, grade: int = 1, section: str = "A",
                year: int = 2025, with_cards: bool = True) -> list[str]:
    """n active students (and linked active cards with uids UID_xxxxx)."""
    codes: list[str] = []
    for i in range(n):
        code = generate_student_code(year, grade, section, codes)
        codes.append(code)
        store.upsert_student(StudentRecord(
            student_code=code,
            given_names=f"Given{i}",
            family_names=f"Family{i}",
            enrollment_year=year,
            grade=grade,
            section=section,
        ))
        if with_cards:
            store.upsert_card(RfidCard(
                uid=uid_for(i),
                state=CardState.ACTIVE,
                linked_student=code,
                issued_at=local_dt(SCHOOL_DAY, "06:00:00"),
            ))
    return codes


def uid_for(i: int) -> str:
    return f"{i:08X}"
