"""Clock abstraction: real wall time or a simulated clock for harness runs.

All timestamps in the system are UTC epoch milliseconds (ints).
"""

from __future__ import annotations

import threading
import time

MS_PER_SECOND = 1000
FIVE_DAYS_MS = 432_000_000


class Clock:
    """Base interface; subclasses supply ``now_ms``."""

    def now_ms(self) -> int:
        raise NotImplementedError


class RealClock(Clock):
    def now_ms(self) -> int:
        return int(time.time() * MS_PER_SECOND)


class SimulatedClock(Clock):
    """Deterministic clock: time moves only when ``advance`` is called."""

    def __init__(self, start_ms: int = 0) -> None:
        self._now_ms = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now_ms

    def advance(self, delta_ms: int) -> int:
        if delta_ms < 0:
            raise ValueError("cannot move the simulated clock backwards")
        with self._lock:
            self._now_ms += delta_ms
            return self._now_ms

    def set(self, now_ms: int) -> None:
        with self._lock:
            if now_ms < self._now_ms:
                raise ValueError("cannot move the simulated clock backwards")
            self._now_ms = now_ms
