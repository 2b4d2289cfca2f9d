"""A due-time scheduler feeding a pool of worker threads.

Items are opaque; duplicates are allowed because consumers treat pops as
attention hints and decide what to do from durable state.
"""

from __future__ import annotations

import heapq
import threading
import time
from typing import Any, Optional

__all__ = ["DueScheduler"]


class DueScheduler:
    def __init__(self, tick: float = 0.1):
        self.tick = tick
        self._heap: list[tuple[float, int, Any]] = []
        self._cond = threading.Condition()
        self._counter = 0
        self._stop = False

    def start(self) -> None:
        with self._cond:
            self._stop = False

    def schedule(self, item: Any, due: float) -> None:
        with self._cond:
            self._counter += 1
            heapq.heappush(self._heap, (due, self._counter, item))
            self._cond.notify()

    def pop_due(self) -> Optional[Any]:
        """Block until an item is due; None once stopped."""
        with self._cond:
            while not self._stop:
                now = time.time()
                if self._heap and self._heap[0][0] <= now:
                    return heapq.heappop(self._heap)[2]
                wait = self.tick
                if self._heap:
                    wait = min(wait, max(0.0, self._heap[0][0] - now))
                self._cond.wait(wait if wait > 0 else self.tick)
            return None

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()
