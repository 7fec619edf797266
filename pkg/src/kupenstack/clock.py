"""Logical time. Every timestamp in the engine is a tick of this clock."""

from __future__ import annotations


class LogicalClock:
    def __init__(self, now: int = 0):
        self._now = now

    @property
    def now(self) -> int:
        return self._now

    def advance(self, ticks: int = 1) -> int:
        self._now += ticks
        return self._now
