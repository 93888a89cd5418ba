"""Time source shared by every service in one deployment.

In ``manual`` mode time only moves when :meth:`VirtualClock.advance` is
called, which makes token expiry, temp-URL expiry and scheduler dispatch
fully deterministic in tests. ``wallclock`` mode follows ``time.time()``.
"""

from __future__ import annotations

import threading
import time

MANUAL = "manual"
WALLCLOCK = "wallclock"

# 2023-11-14T22:13:20Z; any fixed origin works, this one keeps numbers readable
DEFAULT_EPOCH = 1_700_000_000.0


class VirtualClock:
    def __init__(self, mode: str = MANUAL, start: float | None = None):
        if mode not in (MANUAL, WALLCLOCK):
            raise ValueError(f"unknown clock mode {mode!r}")
        self.mode = mode
        self._lock = threading.Lock()
        self._now = DEFAULT_EPOCH if start is None else float(start)
        self._last = self._now

    def now(self) -> float:
        if self.mode == MANUAL:
            with self._lock:
                return self._now
        # never let wallclock readings go backwards (NTP slew etc.)
        with self._lock:
            self._last = max(self._last, time.time())
            return self._last

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("time never decreases")
        if self.mode != MANUAL:
            raise RuntimeError("advance() is only meaningful for a manual clock")
        with self._lock:
            self._now += dt
            return self._now

    def __repr__(self):
        return f"VirtualClock(mode={self.mode!r}, now={self.now()!r})"
