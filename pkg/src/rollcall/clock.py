"""Injectable clocks.

Every time-dependent operation in the platform takes its notion of "now"
from one of these, never from the wall clock directly.  That keeps scan
classification, closure scheduling, and the sync loop deterministic under
the accelerated simulator.
"""

from __future__ import annotations

import threading
import time as _time
from datetime import datetime, timedelta, timezone


class Clock:
    """Interface: aware-UTC now plus interruptible waiting."""

    def now(self) -> datetime:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError

    def wait_until(self, instant: datetime, interrupt: threading.Event | None = None) -> bool:
        """Block until the clock reaches `instant`.

        Returns False if `interrupt` was set first, True otherwise.
        """
        raise NotImplementedError


class SystemClock(Clock):
    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def sleep(self, seconds: float) -> None:
        _time.sleep(max(0.0, seconds))

    def wait_until(self, instant: datetime, interrupt: threading.Event | None = None) -> bool:
        while True:
            remaining = (instant - self.now()).total_seconds()
            if remaining <= 0:
                return True
            if interrupt is not None:
                if interrupt.wait(min(remaining, 0.5)):
                    return False
            else:
                _time.sleep(min(remaining, 0.5))


class VirtualClock(Clock):
    """Discrete virtual time.

    In `auto_advance` mode (single-threaded tests) sleeping simply moves the
    clock forward.  With `auto_advance=False` (the simulator), sleepers block
    until some driver thread calls `advance_to`/`advance`; wakeups happen only
    when virtual time actually reaches the target, so schedule order is
    governed by virtual time, not the OS scheduler.
    """

    def __init__(self, start: datetime, auto_advance: bool = True):
        if start.tzinfo is None:
            raise ValueError("virtual clock start must be timezone-aware")
        self._now = start.astimezone(timezone.utc)
        self.auto_advance = auto_advance
        self._cond = threading.Condition()
        self._closed = False

    def now(self) -> datetime:
        with self._cond:
            return self._now

    def advance_to(self, instant: datetime) -> None:
        with self._cond:
            if instant > self._now:
                self._now = instant.astimezone(timezone.utc)
            self._cond.notify_all()

    def advance(self, seconds: float) -> None:
        with self._cond:
            self._now = self._now + timedelta(seconds=seconds)
            self._cond.notify_all()

    def close(self) -> None:
        """Release all blocked waiters (shutdown)."""
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def sleep(self, seconds: float) -> None:
        target = self.now() + timedelta(seconds=max(0.0, seconds))
        self.wait_until(target)

    def wait_until(self, instant: datetime, interrupt: threading.Event | None = None) -> bool:
        if self.auto_advance:
            self.advance_to(instant)
            return True
        with self._cond:
            while self._now < instant and not self._closed:
                if interrupt is not None and interrupt.is_set():
                    return False
                # short real timeout only for shutdown responsiveness
                self._cond.wait(timeout=0.25)
            return True
