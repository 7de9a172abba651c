"""Edge node composition: wiring, closure scheduling, missed-closure catch-up."""

from __future__ import annotations

import time
from datetime import date

import pytest

from conftest import SCHOOL_DAY, local_dt, seed_roster, uid_for
from rollcall.clock import VirtualClock
from rollcall.domain import Status
from rollcall.edge import EdgeNode
from rollcall.edgestore import EdgeStore
from rollcall.errors import ConfigError
from rollcall.readerlink import ReaderEmulator


def edge_config(tmp_path, **extra):
    cfg = {
        "edge.node_id": "edge-1",
        "edge.store": str(tmp_path / "edge.db"),
        "edge.listen": "127.0.0.1:0",
    }
    cfg.update(extra)
    return cfg


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return False


class TestEdgeNode:
    def test_requires_node_id(self, tmp_path):
        with pytest.raises(ConfigError):
            EdgeNode({"edge.store": str(tmp_path / "e.db")})

    def test_scan_and_scheduled_closure(self, tmp_path):
        clock = VirtualClock(local_dt(SCHOOL_DAY, "06:55:00"), auto_advance=False)
        node = EdgeNode(edge_config(tmp_path), clock)
        seed_roster(node.store, 3)
        node.start()
        try:
            emu = ReaderEmulator(("127.0.0.1", node.reader_port))
            emu.handshake()
            clock.advance_to(local_dt(SCHOOL_DAY, "07:10:00"))
            assert emu.scan(uid_for(0)) == "ACK P"
            emu.close()
            clock.advance_to(local_dt(SCHOOL_DAY, "08:31:05"))
            assert wait_for(lambda: node.store.closure_ran(SCHOOL_DAY))
            ledger = node.store.events_for_day(SCHOOL_DAY)
            statuses = sorted(e.status.value for e in ledger.values())
            assert statuses == ["absent", "absent", "present"]
        finally:
            node.stop()
            clock.close()

    def test_missed_closures_run_at_startup(self, tmp_path):
        friday = date(2025, 8, 1)
        path = str(tmp_path / "edge.db")
        prep = EdgeStore(path, node_id="edge-1")
        seed_roster(prep, 2)
        prep.ensure_first_seen(friday)
        prep.close()

        # node boots on Monday after being off since Thursday night
        clock = VirtualClock(local_dt(SCHOOL_DAY, "09:00:00"), auto_advance=False)
        node = EdgeNode(edge_config(tmp_path), clock)
        node.start()
        try:
            assert wait_for(lambda: node.store.closure_ran(friday))
            assert wait_for(lambda: node.store.closure_ran(SCHOOL_DAY))
            for day in (friday, SCHOOL_DAY):
                ledger = node.store.events_for_day(day)
                assert len(ledger) == 2
                assert all(e.status is Status.ABSENT for e in ledger.values())
            # weekend days were skipped entirely
            assert node.store.events_for_day(date(2025, 8, 2)) == {}
        finally:
            node.stop()
            clock.close()

    def test_export_log_cli_shape(self, tmp_path):
        clock = VirtualClock(local_dt(SCHOOL_DAY, "07:00:00"), auto_advance=False)
        node = EdgeNode(edge_config(tmp_path), clock)
        seed_roster(node.store, 1)
        node.start()
        try:
            emu = ReaderEmulator(("127.0.0.1", node.reader_port))
            emu.handshake()
            clock.advance_to(local_dt(SCHOOL_DAY, "07:30:00"))
            assert emu.scan(uid_for(0)) == "ACK P"
            emu.close()
        finally:
            node.stop()
            clock.close()
        out = tmp_path / "log.jsonl"
        reopened = EdgeStore(str(tmp_path / "edge.db"), node_id="edge-1")
        try:
            assert reopened.export_log(str(out)) == 1
        finally:
            reopened.close()
        assert "2025-08-04" in out.read_text()
