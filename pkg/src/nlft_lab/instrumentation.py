"""Forward-pass and wall-clock accounting."""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager

PURPOSES = ("collection", "generation", "training")


class Counters:
    """Monotone per-purpose forward-pass counts plus phase wall-clock."""

    def __init__(self):
        self.forwards: dict[str, int] = {p: 0 for p in PURPOSES}
        self.seconds: dict[str, float] = {}
        self._lock = threading.Lock()

    def bump(self, purpose: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counters are monotone; n must be >= 0")
        with self._lock:
            self.forwards[purpose] = self.forwards.get(purpose, 0) + n

    def total_forwards(self) -> int:
        with self._lock:
            return sum(self.forwards.values())

    @contextmanager
    def timed(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            with self._lock:
                self.seconds[phase] = self.seconds.get(phase, 0.0) + elapsed

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "forwards": dict(self.forwards),
                "seconds": dict(self.seconds),
            }
