"""Injected time sources.

All engine timing goes through a clock object so that tests run on simulated
time. Three flavors exist: a local simulated clock (discrete-event heap), a
wall clock for demo runs, and a broker-backed clock used by daemon workers
(timers are parked at the broker, which owns the authoritative simulated
time for the whole deployment).
"""

from __future__ import annotations

import heapq
import itertools
import time
from typing import Callable


class TimerHandle:
    __slots__ = ("when", "callback", "cancelled", "timer_id")

    def __init__(self, when: float, callback: Callable[[], None]):
        self.when = when
        self.callback = callback
        self.cancelled = False
        self.timer_id: str | None = None

    def cancel(self) -> None:
        self.cancelled = True


class SimClock:
    """Discrete-event simulated clock. Time only moves via advance calls."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._heap: list[tuple[float, int, TimerHandle]] = []
        self._counter = itertools.count()

    def now(self) -> float:
        return self._now

    def schedule_at(self, when: float, callback: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(max(when, self._now), callback)
        heapq.heappush(self._heap, (handle.when, next(self._counter), handle))
        return handle

    def schedule_after(self, delay: float, callback: Callable[[], None]) -> TimerHandle:
        return self.schedule_at(self._now + delay, callback)

    def next_deadline(self) -> float | None:
        while self._heap and self._heap[0][2].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def advance_to(self, when: float) -> int:
        """Move time forward, firing due timers in order. Never goes backwards."""
        fired = 0
        while True:
            deadline = self.next_deadline()
            if deadline is None or deadline > when:
                break
            _, _, handle = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self._now = max(self._now, handle.when)
            handle.callback()
            fired += 1
        self._now = max(self._now, when)
        return fired

    def advance_next(self) -> bool:
        """Jump to the earliest pending timer; False when none are pending."""
        deadline = self.next_deadline()
        if deadline is None:
            return False
        self.advance_to(deadline)
        return True


class WallClock(SimClock):
    """Timer heap on wall time; the runner blocks until deadlines pass."""

    def __init__(self):
        super().__init__(start=time.monotonic())

    def now(self) -> float:
        self._now = max(self._now, time.monotonic())
        return self._now

    def poll(self) -> int:
        """Fire everything that is due by now."""
        return self.advance_to(time.monotonic())


class BrokerClock:
    """Clock façade for daemon workers: timers live at the broker.

    ``now()`` reflects the latest broker time observed on any inbound frame;
    the broker stamps every frame it sends, and time at the broker never moves
    while a worker still has unprocessed work, so this is exact whenever the
    worker acts on a timer.
    """

    def __init__(self, communicator):
        self._comm = communicator
        self._callbacks: dict[str, TimerHandle] = {}

    def now(self) -> float:
        return self._comm.broker_time

    def schedule_at(self, when: float, callback: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(when, callback)
        handle.timer_id = self._comm.request_timer(when)
        self._callbacks[handle.timer_id] = handle
        return handle

    def schedule_after(self, delay: float, callback: Callable[[], None]) -> TimerHandle:
        return self.schedule_at(self.now() + delay, callback)

    def fire(self, timer_id: str) -> None:
        handle = self._callbacks.pop(timer_id, None)
        if handle is not None and not handle.cancelled:
            handle.callback()

    def cancel(self, handle: TimerHandle) -> None:
        handle.cancel()
