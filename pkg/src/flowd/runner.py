"""The runner: event loop, persistence, communication and transport plumbing.

One runner drives up to ``slots`` processes cooperatively: a process step runs
to completion, then control returns to the loop so other processes and control
messages interleave. In local mode the runner owns a simulated (or wall)
clock and an internal submission queue; in worker mode tasks, timers and
broadcasts arrive from the broker through the communicator mailbox.
"""

from __future__ import annotations

import contextlib
import contextvars
import queue
import time as wall_time
import uuid
from collections import deque
from typing import Any

from .client import BrokerError, Communicator
from .clock import BrokerClock, SimClock, WallClock
from .config import Profile, load_profile
from .functions import ProcessFunction
from .process import Process, TerminalReport, create_process_record
from .registry import load_modules, resolve_process
from .simulation import SimulatedComputer
from .states import EngineError, ProcessState, TERMINAL_STATES
from .store import NotFoundError, Store
from .transport import BackoffPolicy, JobPollRegistry, TransportQueue
from . import wire

_CURRENT_RUNNER: contextvars.ContextVar["Runner | None"] = contextvars.ContextVar(
    "flowd_runner", default=None)


def current_runner() -> "Runner":
    runner = _CURRENT_RUNNER.get()
    if runner is None:
        raise RuntimeError(
            "no active runner; run inside local_run()/runtime() or a worker")
    return runner


@contextlib.contextmanager
def runtime(profile: Profile | str, wall: bool = False):
    """Context manager providing a local runner for direct process calls."""
    prof = profile if isinstance(profile, Profile) else load_profile(profile)
    runner = Runner(prof, clock=WallClock() if wall else SimClock())
    token = _CURRENT_RUNNER.set(runner)
    try:
        yield runner
    finally:
        _CURRENT_RUNNER.reset(token)


class Runner:
    def __init__(self, profile: Profile, communicator: Communicator | None = None,
                 clock=None, slots: int | None = None, worker_id: str | None = None):
        self.profile = profile
        self.store = Store(profile.store_path, sync=profile.get("store_sync"))
        self.communicator = communicator
        if clock is not None:
            self.clock = clock
        elif communicator is not None:
            self.clock = BrokerClock(communicator)
        else:
            self.clock = SimClock()
        self.slots = slots if slots is not None else profile.get("slots")
        self.worker_id = worker_id or f"runner-{uuid.uuid4().hex[:8]}"
        self.backoff_policy = BackoffPolicy(
            initial_interval=profile.get("backoff_initial_interval"),
            max_retries=profile.get("backoff_max_retries"))
        self.processes: dict[str, Process] = {}
        self._task_for: dict[str, str] = {}
        self._ready: deque = deque()
        self._local_queue: deque = deque()
        self._subscriptions: dict[str, set[str]] = {}
        self._computers: dict[str, SimulatedComputer] = {}
        self._transport_queues: dict[str, TransportQueue] = {}
        self._poll_registries: dict[str, JobPollRegistry] = {}
        self._last_seq = 0
        self._stop_requested = False
        load_modules(profile.get("load_modules"))

    # -- scheduling --------------------------------------------------------

    def call_soon(self, fn, process: Process | None = None) -> None:
        self._ready.append((fn, process))

    def _run_ready_one(self) -> None:
        fn, process = self._ready.popleft()
        token = _CURRENT_RUNNER.set(self)
        try:
            fn()
        except Exception as exc:
            if process is not None:
                process.fail_with_exception(exc)
            else:
                self.store_log_safe(f"unhandled callback error: {exc!r}")
        finally:
            _CURRENT_RUNNER.reset(token)

    def store_log_safe(self, message: str) -> None:
        try:
            import sys

            print(f"[{self.worker_id}] {message}", file=sys.stderr, flush=True)
        except Exception:
            pass

    # -- simulated computers -----------------------------------------------------

    def add_computer(self, computer: SimulatedComputer) -> None:
        self._computers[computer.name] = computer

    def get_computer(self, name: str) -> SimulatedComputer:
        if name not in self._computers:
            config = self.profile.computer(name)
            self._computers[name] = SimulatedComputer.from_config(
                self.profile, config, self.clock)
        return self._computers[name]

    def transport_queue(self, name: str) -> TransportQueue:
        if name not in self._transport_queues:
            self._transport_queues[name] = TransportQueue(self.clock,
                                                          self.get_computer(name))
        return self._transport_queues[name]

    def poll_registry(self, name: str) -> JobPollRegistry:
        if name not in self._poll_registries:
            self._poll_registries[name] = JobPollRegistry(
                self.clock, self.get_computer(name), self.transport_queue(name))
        return self._poll_registries[name]

    # -- state-change fan-out ---------------------------------------------------------

    def emit_state_change(self, process: Process, old_state: ProcessState,
                          new_state: ProcessState) -> None:
        subject = f"state_changed.{old_state.value}.{new_state.value}"
        if self.communicator is not None and self.communicator.connected:
            try:
                self.communicator.broadcast(subject, process.node_id)
            except Exception:
                pass
        if new_state in TERMINAL_STATES:
            self._notify_local_parents(process.node_id)

    def _notify_local_parents(self, child_id: str) -> None:
        for parent_id in list(self._subscriptions.get(child_id, ())):
            parent = self.processes.get(parent_id)
            if parent is not None:
                self.call_soon(
                    lambda p=parent, c=child_id: p.on_child_terminated(c),
                    process=parent)

    def subscribe_child(self, parent: Process, child_id: str) -> None:
        watchers = self._subscriptions.setdefault(child_id, set())
        if parent.node_id not in watchers:
            watchers.add(parent.node_id)
            if self.communicator is not None:
                self.communicator.subscribe("state_changed.*", child_id)

    def unsubscribe_child(self, parent: Process, child_id: str) -> None:
        watchers = self._subscriptions.get(child_id)
        if watchers is not None:
            watchers.discard(parent.node_id)
            if not watchers:
                self._subscriptions.pop(child_id, None)
                if self.communicator is not None:
                    self.communicator.unsubscribe("state_changed.*", child_id)

    # -- submission --------------------------------------------------------------------

    def create_checkpointed_process(self, process_cls, inputs: dict | None,
                                    caller_id: str | None = None) -> str:
        """Validate, create the provenance record and the initial checkpoint."""
        if isinstance(process_cls, ProcessFunction) or \
                not getattr(process_cls, "checkpointable", False):
            raise EngineError(
                "only checkpointable process classes can be submitted; call "
                "function processes directly")
        validation = process_cls.spec().inputs.validate(inputs or {})
        validation.raise_for_errors()
        node_id = create_process_record(self.store, process_cls,
                                        validation.resolved, caller_id)
        proc = process_cls(self, node_id, validation.resolved)
        proc.persist()
        return node_id

    def submit_root(self, process_cls, inputs: dict | None = None) -> str:
        node_id = self.create_checkpointed_process(process_cls, inputs)
        self._enqueue(node_id)
        return node_id

    def submit_child(self, parent: Process, process_cls, inputs: dict) -> str:
        node_id = self.create_checkpointed_process(process_cls, inputs,
                                                   caller_id=parent.node_id)
        self._enqueue(node_id)
        return node_id

    def _enqueue(self, node_id: str) -> None:
        if self.communicator is not None:
            self.communicator.publish_task(node_id)
        else:
            self._local_queue.append(node_id)

    # -- child control -----------------------------------------------------------------

    def kill_child(self, child_id: str, reason: str) -> None:
        local = self.processes.get(child_id)
        if local is not None:
            local.kill(reason)
            return
        if self.communicator is not None:
            try:
                reply = self.communicator.rpc(child_id, "kill",
                                              {"reason": reason}, timeout=3.0)
                if reply.get("ok"):
                    return
            except BrokerError:
                pass
        self._kill_in_store(child_id, reason)

    def _kill_in_store(self, child_id: str, reason: str) -> None:
        """Kill a process that no runner currently owns (still queued)."""
        try:
            payload = self.store.load_checkpoint(child_id)
        except NotFoundError:
            return  # already terminal
        try:
            cls = resolve_process(payload["process"])
            proc = cls.from_checkpoint(self, child_id, payload)
            proc.kill(reason)
        except Exception as exc:
            self.store_log_safe(f"failed to kill queued process {child_id}: {exc!r}")

    # -- continuing processes ------------------------------------------------------------

    def _continue(self, node_id: str, task_id: str | None = None) -> None:
        if task_id is not None:
            self._task_for[node_id] = task_id
        if node_id in self.processes:
            self._ack_if_tasked(node_id)  # duplicate delivery of a live process
            return
        try:
            payload = self.store.load_checkpoint(node_id)
        except NotFoundError:
            # At-least-once redelivery of an already terminal process.
            record = self.store.node(node_id)
            if record.attributes.get("process_state") in ("finished", "excepted",
                                                          "killed"):
                self._ack_if_tasked(node_id)
            else:
                self.store_log_safe(f"no checkpoint for live process {node_id}")
                self._ack_if_tasked(node_id)
            return
        cls = resolve_process(payload["process"])
        proc = cls.from_checkpoint(self, node_id, payload)
        self.processes[node_id] = proc
        self.store.set_attributes(node_id, {"last_worker": self.worker_id})
        if self.communicator is not None:
            self.communicator.owner_add(node_id)
        token = _CURRENT_RUNNER.set(self)
        try:
            proc.resume()
        except Exception as exc:
            proc.fail_with_exception(exc)
        finally:
            _CURRENT_RUNNER.reset(token)

    def _ack_if_tasked(self, node_id: str) -> None:
        task_id = self._task_for.pop(node_id, None)
        if task_id is not None and self.communicator is not None:
            try:
                self.communicator.ack(task_id)
            except BrokerError as exc:
                self.store_log_safe(f"ack failed for {node_id}: {exc}")

    def process_terminated(self, process: Process) -> None:
        node_id = process.node_id
        self.processes.pop(node_id, None)
        if self.communicator is not None:
            self.communicator.owner_rm(node_id)
        self._ack_if_tasked(node_id)

    # -- local execution -----------------------------------------------------------------

    def _pump_local(self) -> None:
        while self._local_queue and len(self.processes) < self.slots:
            self._continue(self._local_queue.popleft())

    def run_until_complete(self, node_id: str) -> TerminalReport:
        """Drive the local loop until the given process is terminal."""
        if self.communicator is not None:
            raise EngineError("run_until_complete is for local runners")
        while True:
            self._pump_local()
            while self._ready:
                self._run_ready_one()
                self._pump_local()
            state = self.store.node(node_id).attributes.get("process_state")
            if state in ("finished", "excepted", "killed"):
                break
            if self._ready or self._local_queue:
                continue
            if isinstance(self.clock, WallClock):
                deadline = self.clock.next_deadline()
                if deadline is None:
                    raise EngineError("deadlock: nothing to run and no timers")
                wall_time.sleep(max(0.0, deadline - wall_time.monotonic()))
                self.clock.poll()
            elif isinstance(self.clock, SimClock):
                if not self.clock.advance_next():
                    raise EngineError(
                        "deadlock: nothing to run and no pending timers "
                        "(are there enough slots for waiting parents?)")
            else:
                raise EngineError("local loop requires a local clock")
        return self.report_for(node_id)

    def drain(self) -> None:
        """Run the local loop until no callbacks, admissions or timers remain.

        Unlike :meth:`run_until_complete` this returns quietly when the system
        parks (e.g. a paused process), which is what fault-injection drills
        want to observe.
        """
        if self.communicator is not None:
            raise EngineError("drain is for local runners")
        while True:
            self._pump_local()
            progressed = False
            while self._ready:
                self._run_ready_one()
                self._pump_local()
                progressed = True
            if isinstance(self.clock, WallClock) or not isinstance(self.clock, SimClock):
                return
            if self.clock.advance_next():
                continue
            if not progressed:
                return

    def report_for(self, node_id: str) -> TerminalReport:
        record = self.store.node(node_id)
        outputs: dict[str, Any] = {}
        for label, out_id in self.store.outputs_of(node_id).items():
            out_record = self.store.node(out_id)
            outputs[label] = out_record.value() if out_record.kind == "data" else out_id
        return TerminalReport(
            node_id,
            ProcessState(record.attributes.get("process_state")),
            record.attributes.get("exit_status"),
            record.attributes.get("exit_message"),
            outputs,
        )

    # -- worker execution --------------------------------------------------------------------

    def request_stop(self) -> None:
        self._stop_requested = True
        if self.communicator is not None:
            self.communicator.mailbox.put({"type": "_stop"})

    def serve_forever(self) -> None:
        if self.communicator is None:
            raise EngineError("worker mode requires a broker connection")
        comm = self.communicator
        comm.consume(self.slots)
        try:
            while not self._stop_requested:
                while True:
                    try:
                        frame = comm.mailbox.get_nowait()
                    except queue.Empty:
                        break
                    self._handle_frame(frame)
                if self._stop_requested:
                    break
                if self._ready:
                    self._run_ready_one()
                    continue
                comm.idle(self._last_seq)
                try:
                    frame = comm.mailbox.get(timeout=1.0)
                except queue.Empty:
                    continue
                self._handle_frame(frame)
        finally:
            self._orderly_shutdown()

    def _orderly_shutdown(self) -> None:
        for process in list(self.processes.values()):
            try:
                process.persist()
            except Exception:
                pass
        if self.communicator is not None:
            self.communicator.close()

    def _handle_frame(self, frame: dict) -> None:
        ftype = frame.get("type")
        if "seq" in frame:
            self._last_seq = max(self._last_seq, frame["seq"])
        if ftype == wire.TASK:
            self._continue(frame["process"], frame["task"])
        elif ftype == wire.TIMER_FIRE:
            try:
                token = _CURRENT_RUNNER.set(self)
                try:
                    self.clock.fire(frame["timer"])
                finally:
                    _CURRENT_RUNNER.reset(token)
            except Exception as exc:
                self.store_log_safe(f"timer callback failed: {exc!r}")
        elif ftype == wire.RPC:
            self._handle_rpc(frame)
        elif ftype == wire.BROADCAST:
            self._handle_broadcast(frame)
        elif ftype == "_stop":
            self._stop_requested = True
        elif ftype == "_disconnected":
            self._stop_requested = True
            raise BrokerError("broker connection lost")
        # stray acks/errors without waiters are ignored

    def _handle_rpc(self, frame: dict) -> None:
        target = frame.get("target")
        verb = frame.get("verb")
        args = frame.get("args", {})
        correlation = frame.get("correlation")
        process = self.processes.get(target)
        if process is None:
            payload = {"ok": False, "error": "process not owned by this worker"}
        elif verb == "status":
            payload = {"ok": True, "state": process.state.value,
                       "paused": process.paused}
        elif verb == "kill":
            token = _CURRENT_RUNNER.set(self)
            try:
                done = process.kill(args.get("reason", "killed by user"))
            finally:
                _CURRENT_RUNNER.reset(token)
            payload = {"ok": done, "state": process.state.value}
            if not done:
                payload["error"] = f"process already {process.state.value}"
        elif verb == "pause":
            done = process.pause(args.get("message"))
            payload = {"ok": done, "state": process.state.value}
            if not done:
                payload["error"] = f"process already {process.state.value}"
        elif verb == "play":
            token = _CURRENT_RUNNER.set(self)
            try:
                done = process.play()
            finally:
                _CURRENT_RUNNER.reset(token)
            payload = {"ok": done, "state": process.state.value}
            if not done:
                payload["error"] = "process is not paused"
        else:
            payload = {"ok": False, "error": f"unknown verb {verb!r}"}
        if correlation is not None and self.communicator is not None:
            self.communicator.rpc_reply(correlation, payload)

    def _handle_broadcast(self, frame: dict) -> None:
        subject = frame.get("subject", "")
        sender = frame.get("sender", "")
        parts = subject.split(".")
        if len(parts) == 3 and parts[0] == "state_changed" and \
                parts[2] in ("finished", "excepted", "killed"):
            self._notify_local_parents(sender)


# -- public helpers ---------------------------------------------------------------


def local_run(definition, *args, profile: Profile | str | None = None,
              wall: bool = False, **inputs) -> TerminalReport:
    """Blocking execution in the caller's context, without broker or daemon."""
    prof = profile if isinstance(profile, Profile) else load_profile(profile)
    runner = Runner(prof, clock=WallClock() if wall else SimClock())
    token = _CURRENT_RUNNER.set(runner)
    try:
        if isinstance(definition, ProcessFunction):
            _, node = definition.run_get_node(*args, **inputs)
            return runner.report_for(node.id)
        if args:
            raise EngineError("positional arguments are only supported for "
                              "function processes; pass inputs as keywords")
        node_id = runner.submit_root(definition, inputs)
        return runner.run_until_complete(node_id)
    finally:
        _CURRENT_RUNNER.reset(token)


def submit(definition, inputs: dict | None = None,
           profile: Profile | str | None = None) -> str:
    """Create the process and hand it to the daemon through the broker."""
    prof = profile if isinstance(profile, Profile) else load_profile(profile)
    runner = Runner(prof)
    node_id = runner.create_checkpointed_process(definition, inputs)
    comm = Communicator.connect(prof.broker_socket, "client",
                                f"client-{uuid.uuid4().hex[:8]}")
    try:
        comm.publish_task(node_id)
    finally:
        comm.close()
    return node_id
