"""Worker lanes pulling contingencies from one serialized queue."""
from __future__ import annotations

import heapq
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence


@dataclass
class LaneTimings:
    """Per-lane completion times measured from the start of the sweep.

    ``busy`` holds the summed task time per lane; ``finish`` the time at
    which each lane completed its last task. The makespan is the largest
    finish time.
    """

    busy: list[float]
    finish: list[float]
    wall: float = 0.0
    events: list[tuple] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max(self.finish) if self.finish else 0.0


def predict_makespan(durations: Sequence[float], lanes: int) -> float:
    """Greedy list scheduling: each task goes to the lane that frees first."""
    if lanes < 1:
        raise ValueError("need at least one lane")
    heap = [(0.0, k) for k in range(lanes)]
    for d in durations:
        t, k = heapq.heappop(heap)
        heapq.heappush(heap, (t + d, k))
    return max(t for t, _ in heap)


class LanePool:
    """``D`` persistent worker lanes.

    :meth:`run_batch` hands a list of tasks to the lanes; each lane takes the
    next task the moment it finishes the previous one, queue reads are
    mutually exclusive and the call returns only after every task of the
    batch is done (group barrier). Results come back in submission order.
    """

    def __init__(self, lanes: int):
        if lanes < 1:
            raise ValueError("worker count D must be >= 1")
        self.lanes = lanes
        self._cv = threading.Condition()
        self._tasks: list = []
        self._next = 0
        self._pending = 0
        self._results: list = []
        self._closed = False
        self._t0: float | None = None
        self.busy = [0.0] * lanes
        self.finish = [0.0] * lanes
        self.events: list[tuple] = []
        self._threads = [threading.Thread(target=self._lane, args=(k,), daemon=True,
                                          name=f"dca-lane-{k}") for k in range(lanes)]
        for t in self._threads:
            t.start()

    def _take(self):
        with self._cv:
            while not self._closed and self._next >= len(self._tasks):
                self._cv.wait()
            if self._closed:
                return None
            i = self._next
            self._next += 1
            return i, self._tasks[i]

    def _lane(self, k: int):
        while True:
            item = self._take()
            if item is None:
                return
            i, task = item
            start = time.perf_counter()
            try:
                result = task(k)
            except BaseException as exc:  # surfaced by run_batch
                result = _Failure(exc)
            end = time.perf_counter()
            with self._cv:
                self._results[i] = result
                self.busy[k] += end - start
                self.finish[k] = end - self._t0
                self.events.append(("end", i, k, start - self._t0, end - self._t0))
                self._pending -= 1
                self._cv.notify_all()

    def start_clock(self) -> None:
        self._t0 = time.perf_counter()
        self.busy = [0.0] * self.lanes
        self.finish = [0.0] * self.lanes
        self.events = []

    def run_batch(self, tasks: Sequence[Callable[[int], object]]) -> list:
        if self._t0 is None:
            self.start_clock()
        if not tasks:
            return []
        with self._cv:
            self._tasks = list(tasks)
            self._results = [None] * len(tasks)
            self._next = 0
            self._pending = len(tasks)
            self._cv.notify_all()
            while self._pending:
                self._cv.wait()
            results, self._tasks = self._results, []
            self.events.append(("barrier", len(results), time.perf_counter() - self._t0))
        for r in results:
            if isinstance(r, _Failure):
                raise r.exc
        return results

    def timings(self) -> LaneTimings:
        wall = time.perf_counter() - self._t0 if self._t0 is not None else 0.0
        return LaneTimings(list(self.busy), list(self.finish), wall, list(self.events))

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()
        for t in self._threads:
            t.join(timeout=1.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc
