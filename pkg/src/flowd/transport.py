"""Connection rationing, scheduler-request bundling and retry policy.

Each worker holds one transport queue per remote computer: jobs request an
open transport instead of connecting themselves, and the queue opens at most
one connection per safe interval, sharing it among all pending requesters.
Status polling is bundled the same way: jobs register with a poll registry
which issues a single scheduler query per cycle for every registered id.
Transport work is wrapped in an exponential-back-off retrier that pauses the
owning process when retries are exhausted instead of letting it except.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .simulation import SimulatedComputer, TransportError


@dataclass
class BackoffPolicy:
    initial_interval: float = 5.0
    max_retries: int = 5

    def retry_offset(self, retry: int) -> float:
        """Offset of 1-based retry k from the start of the failure burst."""
        return self.initial_interval * (2 ** (retry - 1))


class BackoffRetry:
    """Retry controller for one transport stage of one process.

    The first attempt runs immediately; retry k is scheduled at
    ``burst_start + initial_interval * 2**(k-1)``. A success resets the
    counter; exhausting ``max_retries`` calls ``on_exhausted`` with the last
    error (the engine then pauses the process rather than excepting it).
    """

    def __init__(self, clock, policy: BackoffPolicy, attempt: Callable[[], None],
                 on_exhausted: Callable[[Exception], None],
                 on_retry_scheduled: Callable[[int, float, Exception], None] | None = None):
        self.clock = clock
        self.policy = policy
        self.attempt = attempt
        self.on_exhausted = on_exhausted
        self.on_retry_scheduled = on_retry_scheduled
        self.retries = 0
        self.burst_start: float | None = None

    def start(self) -> None:
        self.attempt()

    def succeeded(self) -> None:
        self.retries = 0
        self.burst_start = None

    def failed(self, error: Exception) -> None:
        if self.burst_start is None:
            self.burst_start = self.clock.now()
        self.retries += 1
        if self.retries > self.policy.max_retries:
            self.on_exhausted(error)
            return
        when = self.burst_start + self.policy.retry_offset(self.retries)
        if self.on_retry_scheduled is not None:
            self.on_retry_scheduled(self.retries, when, error)
        self.clock.schedule_at(when, self.attempt)

    def reset(self) -> None:
        self.retries = 0
        self.burst_start = None


class TransportQueue:
    """Per-worker, per-computer rationer of connection openings.

    Requests are collected and served FIFO from a single opening; openings are
    spaced at least ``safe_interval`` apart. An opening failure propagates to
    every pending requester (their stage retriers then back off).
    """

    def __init__(self, clock, computer: SimulatedComputer):
        self.clock = clock
        self.computer = computer
        self._pending: list[Callable] = []
        self._opening_scheduled = False
        self._last_open: float | None = None

    def request(self, callback: Callable) -> None:
        """Enqueue `callback(transport_or_exception)` for the next opening."""
        self._pending.append(callback)
        self._schedule_opening()

    def _schedule_opening(self) -> None:
        if self._opening_scheduled or not self._pending:
            return
        now = self.clock.now()
        if self._last_open is None:
            when = now
        else:
            when = max(now, self._last_open + self.computer.safe_interval)
        self._opening_scheduled = True
        self.clock.schedule_at(when, self._open_and_serve)

    def _open_and_serve(self) -> None:
        self._opening_scheduled = False
        if not self._pending:
            return
        batch, self._pending = self._pending, []
        self._last_open = self.clock.now()
        try:
            transport = self.computer.open_transport()
        except TransportError as exc:
            for callback in batch:
                callback(exc)
            self._schedule_opening()
            return
        try:
            for callback in batch:
                callback(transport)
        finally:
            transport.close()
        self._schedule_opening()


class JobPollRegistry:
    """Per-worker bundler of scheduler status queries.

    Registered jobs share one scheduler query per polling cycle; completed
    jobs are deregistered and handed their final state. A failing query is
    reported to every registered job (each backs off independently).
    """

    def __init__(self, clock, computer: SimulatedComputer, queue: TransportQueue):
        self.clock = clock
        self.computer = computer
        self.queue = queue
        self._interested: dict[str, Callable] = {}
        self._cycle_scheduled = False
        self.cycles = 0

    def register(self, job_id: str, on_update: Callable) -> None:
        """`on_update(state_or_exception)` fires once per poll cycle."""
        self._interested[job_id] = on_update
        self._schedule_cycle(immediate=True)

    def deregister(self, job_id: str) -> None:
        self._interested.pop(job_id, None)

    def _schedule_cycle(self, immediate: bool = False) -> None:
        if self._cycle_scheduled or not self._interested:
            return
        self._cycle_scheduled = True
        delay = 0.0 if immediate else self.computer.poll_interval
        self.clock.schedule_at(self.clock.now() + delay, self._request_poll)

    def _request_poll(self) -> None:
        self.queue.request(self._poll)

    def _poll(self, transport_or_error) -> None:
        self._cycle_scheduled = False
        if not self._interested:
            return
        self.cycles += 1
        snapshot = dict(self._interested)
        if isinstance(transport_or_error, Exception):
            # One failed query fails the whole cycle; every job backs off and
            # re-registers on its own schedule.
            self._interested.clear()
            for callback in snapshot.values():
                callback(transport_or_error)
        else:
            try:
                states = transport_or_error.poll_jobs(sorted(snapshot))
            except TransportError as exc:
                for callback in snapshot.values():
                    callback(exc)
            else:
                for job_id, callback in snapshot.items():
                    state = states.get(job_id, "unknown")
                    if state in ("done", "cancelled", "unknown"):
                        self.deregister(job_id)
                    callback(state)
        self._schedule_cycle()
