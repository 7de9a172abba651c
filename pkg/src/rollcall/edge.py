"""Edge node composition: store + engine + reader listener + closure scheduler
+ sync worker, wired from a config file and an injectable clock.

The closure scheduler runs any closure missed while the node was powered off
(every unclosed past school day) at startup, then sleeps on the clock until
the next closure instant.  Local operation never depends on the sync worker.
"""

from __future__ import annotations

import logging
import threading

from . import config as cfgmod
from .clock import Clock, SystemClock
from .edgestore import EdgeStore
from .engine import AttendanceEngine, TimeWindowPolicy
from .readerlink import ReaderLinkServer
from .syncproto import SyncClient, SyncWorker

log = logging.getLogger(__name__)

DEFAULT_READER_LISTEN = "127.0.0.1:7420"


class EdgeNode:
    def __init__(self, cfg: dict[str, str], clock: Clock | None = None):
        self.clock = clock or SystemClock()
        self.node_id = cfgmod.get_str(cfg, "edge.node_id")
        store_path = cfgmod.get_str(cfg, "edge.store")
        self.store = EdgeStore(store_path, node_id=self.node_id)
        policy = TimeWindowPolicy.from_config(cfg)
        self.engine = AttendanceEngine(self.store, policy, self.clock)
        self.store.ensure_first_seen(policy.school_day_of(self.clock.now()))

        host, port = cfgmod.get_hostport(cfg, "edge.listen", DEFAULT_READER_LISTEN)
        self.reader_server = ReaderLinkServer(host, port, self.engine)

        self.sync_worker: SyncWorker | None = None
        central_url = cfg.get("edge.central_url")
        if central_url:
            node_key = cfgmod.get_str(cfg, "edge.node_key")
            client = SyncClient(central_url, self.node_id, node_key,
                                timeout=cfgmod.get_float(cfg, "edge.sync_timeout_s", 10.0))
            self.sync_worker = SyncWorker(
                self.store, client, self.clock,
                interval_s=cfgmod.get_float(cfg, "edge.sync_interval_s", 15.0),
                engine=self.engine,
                backoff_base_s=cfgmod.get_float(cfg, "edge.sync_backoff_base_s", 5.0),
                backoff_cap_s=cfgmod.get_float(cfg, "edge.sync_backoff_cap_s", 300.0),
            )

        self._stop = threading.Event()
        self._closure_thread: threading.Thread | None = None

    @classmethod
    def from_config_file(cls, path: str, clock: Clock | None = None) -> "EdgeNode":
        return cls(cfgmod.load_config(path), clock)

    @property
    def reader_port(self) -> int:
        return self.reader_server.port

    def start(self) -> None:
        self.reader_server.start()
        self._closure_thread = threading.Thread(target=self._closure_loop,
                                                name="closure-scheduler", daemon=True)
        self._closure_thread.start()
        if self.sync_worker is not None:
            self.sync_worker.start()
        log.info("edge node %s up; readers on port %d", self.node_id, self.reader_port)

    def stop(self) -> None:
        self._stop.set()
        if self.sync_worker is not None:
            self.sync_worker.stop()
        self.reader_server.stop()
        if self._closure_thread is not None:
            self._closure_thread.join(timeout=5)
        self.store.close()

    def _run_due_closures(self) -> None:
        for day in self.engine.closure_backlog():
            try:
                created = self.engine.run_closure(day)
                log.info("closure for %s: %d absences", day.isoformat(), len(created))
            except Exception:
                log.exception("closure for %s failed", day.isoformat())

    def _closure_loop(self) -> None:
        self._run_due_closures()  # catch up on days missed while powered off
        while not self._stop.is_set():
            instant = self.engine.next_closure_instant()
            if not self.clock.wait_until(instant, interrupt=self._stop):
                return
            if self._stop.is_set():
                return
            self._run_due_closures()
