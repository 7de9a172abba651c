"""Offline-first school attendance platform.

An edge node ingests RFID scans from reader nodes over a line-based wire
protocol, classifies them against a morning time-window policy, persists
locally, and synchronizes idempotently with a central roster and reporting
service.
"""

__version__ = "0.1.0"
