"""Checkpointed, interruptible workflows driven by an outline.

A work chain executes its outline one step at a time; between steps the engine
persists the context and cursor, commits recorded outputs, and either resumes
immediately, waits on submitted subprocesses, or terminates through an exit
code.
"""

from __future__ import annotations

from typing import Any

from .outline import OutlineCursor, OutlineProgram, compile_outline
from .process import Process, pop_caller, push_caller
from .serialize import decode, encode
from .spec import ExitCode, ProcessSpec
from .states import EngineError, ProcessState
from .store import NodeProxy


class WorkChainSpec(ProcessSpec):
    def __init__(self, name: str | None = None):
        super().__init__(name)
        self.outline_program: OutlineProgram | None = None

    def outline(self, *items) -> None:
        self.outline_program = compile_outline(items)


class Context:
    """The chain's persisted workspace; attribute and mapping access."""

    def __init__(self, data: dict | None = None):
        object.__setattr__(self, "_data", data if data is not None else {})

    def __getattr__(self, key: str) -> Any:
        try:
            return self._data[key]
        except KeyError:
            raise AttributeError(f"context has no value {key!r}") from None

    def __setattr__(self, key: str, value: Any) -> None:
        self._data[key] = value

    def __delattr__(self, key: str) -> None:
        del self._data[key]

    def __getitem__(self, key: str) -> Any:
        return self._data[key]

    def __setitem__(self, key: str, value: Any) -> None:
        self._data[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def get(self, key: str, default: Any = None) -> Any:
        return self._data.get(key, default)

    def setdefault(self, key: str, default: Any) -> Any:
        return self._data.setdefault(key, default)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def to_dict(self) -> dict:
        return dict(self._data)

    def __repr__(self) -> str:
        return f"Context({self._data!r})"


class AwaitableRef:
    """A submitted child process bound (later) to a context key."""

    __slots__ = ("child_id", "key", "mode", "resolved")

    def __init__(self, child_id: str, key: str | None = None,
                 mode: str = "assign", resolved: bool = False):
        self.child_id = child_id
        self.key = key
        self.mode = mode
        self.resolved = resolved

    def to_doc(self) -> dict:
        return {"child": self.child_id, "key": self.key,
                "mode": self.mode, "resolved": self.resolved}

    @classmethod
    def from_doc(cls, doc: dict) -> "AwaitableRef":
        return cls(doc["child"], doc["key"], doc["mode"], doc["resolved"])

    def __repr__(self):
        return (f"AwaitableRef(child={self.child_id[:8]}, key={self.key!r}, "
                f"mode={self.mode}, resolved={self.resolved})")


class append_:
    """Marks an awaitable for list-append resolution instead of assignment."""

    def __init__(self, awaitable: AwaitableRef):
        if not isinstance(awaitable, AwaitableRef):
            raise EngineError("append_ wraps the awaitable returned by submit()")
        self.awaitable = awaitable


class ToContext(dict):
    """Return value container registering awaitables under context keys."""


class WorkChain(Process):
    kind = "work_chain"
    spec_class = WorkChainSpec

    @classmethod
    def define(cls, spec: WorkChainSpec) -> None:
        super().define(spec)

    @classmethod
    def spec(cls) -> WorkChainSpec:
        built = super().spec()
        if built.outline_program is not None:
            built.outline_program.validate_against(cls)
        return built  # type: ignore[return-value]

    def __init__(self, runner, node_id, inputs, state=ProcessState.CREATED):
        super().__init__(runner, node_id, inputs, state)
        self.ctx = Context()
        program = self.spec().outline_program
        if program is None:
            raise EngineError(f"{type(self).__name__} defines no outline")
        self._program = program
        self._cursor = OutlineCursor()
        self._awaitables: list[AwaitableRef] = []
        self._in_condition = False
        self._in_step = False
        self._step_parked = False

    # -- execution ------------------------------------------------------------

    def on_run(self) -> None:
        self.runner.call_soon(self._step_callback, process=self)

    def resume(self) -> None:
        """Re-enter after loading from a checkpoint."""
        if self.state is ProcessState.CREATED:
            self.start()
            return
        if self.state is ProcessState.WAITING:
            self._watch_awaitables()
            return
        if self.state is ProcessState.RUNNING:
            self.runner.call_soon(self._step_callback, process=self)

    def _step_callback(self) -> None:
        if self.is_terminal:
            return
        if self.paused:
            self._step_parked = True
            return
        self._run_one_step()

    def on_played(self) -> None:
        if self._step_parked:
            self._step_parked = False
            self.runner.call_soon(self._step_callback, process=self)

    def _evaluate_condition(self, name: str) -> bool:
        self._in_condition = True
        try:
            return bool(getattr(self, name)())
        finally:
            self._in_condition = False

    def _run_one_step(self) -> None:
        name = self._cursor.seek_step(self._program, self._evaluate_condition)
        if name is None:
            self._finalize()
            return
        pending_before = len(self._awaitables)
        self._in_step = True
        token = push_caller(self.node_id)
        try:
            outcome = getattr(self, name)()
        finally:
            pop_caller(token)
            self._in_step = False
        if isinstance(outcome, ToContext):
            self.to_context(**outcome)
            outcome = None
        self.commit_outputs()
        abort = self._interpret_abort(outcome)
        new_awaitables = len(self._awaitables) > pending_before
        if abort is not None and new_awaitables:
            raise EngineError(
                f"step {name!r} both registered awaitables and aborted; "
                "a step may wait or abort, not both")
        self._cursor.advance()
        if abort is not None:
            status, message = abort
            self.finish(status, message)
            return
        if self._awaitables:
            self.transition_to(ProcessState.WAITING)
            self._watch_awaitables()
            return
        if self._cursor.seek_step(self._program, self._evaluate_condition) is None:
            self._finalize()
            return
        self.transition_to(ProcessState.RUNNING)  # step boundary: checkpoint + broadcast
        self.runner.call_soon(self._step_callback, process=self)

    @staticmethod
    def _interpret_abort(outcome) -> tuple[int, str | None] | None:
        if outcome is None:
            return None
        if isinstance(outcome, ExitCode):
            return int(outcome.status), outcome.message
        if isinstance(outcome, bool):
            raise EngineError("a step must return None, a positive int or an exit code")
        if isinstance(outcome, int):
            if outcome <= 0:
                raise EngineError(
                    f"step returned {outcome}; aborting requires a positive status")
            return outcome, None
        raise EngineError(
            f"step returned {outcome!r}; expected None, a positive int, an exit "
            "code or ToContext")

    def _finalize(self) -> None:
        missing = self.missing_required_outputs()
        if missing:
            self.finish(11, "required output(s) not emitted")
            return
        self.finish(0)

    def terminal_extras(self) -> dict:
        # The checkpoint disappears on terminal transitions; keep the final
        # context inspectable (and comparable) as a node attribute.
        return {"context": encode(self.ctx.to_dict(), "context")}

    # -- step API -------------------------------------------------------------

    def submit(self, process_cls, **inputs) -> AwaitableRef:
        if self._in_condition:
            raise EngineError("conditions must not submit subprocesses")
        child_id = self.runner.submit_child(self, process_cls, inputs)
        return AwaitableRef(child_id)

    def to_context(self, **kwargs) -> None:
        if self._in_condition:
            raise EngineError("conditions must not register awaitables")
        for key, item in kwargs.items():
            if isinstance(item, append_):
                awaitable = item.awaitable
                awaitable.mode = "append"
            elif isinstance(item, AwaitableRef):
                awaitable = item
                awaitable.mode = "assign"
            else:
                raise EngineError(
                    f"to_context values must be awaitables, got {item!r} for {key!r}")
            awaitable.key = key
            self._awaitables.append(awaitable)

    def out(self, label: str, value: Any) -> None:
        if self._in_condition:
            raise EngineError("conditions must not record outputs")
        super().out(label, value)

    # -- awaitable resolution ----------------------------------------------------

    def _watch_awaitables(self) -> None:
        """Subscribe to pending children, then close the lost-broadcast race by
        re-checking their terminal state in the store."""
        pending = [a for a in self._awaitables if not a.resolved]
        for awaitable in pending:
            self.runner.subscribe_child(self, awaitable.child_id)
        for awaitable in pending:
            record = self.runner.store.node(awaitable.child_id)
            if record.attributes.get("process_state") in ("finished", "excepted", "killed"):
                self.on_child_terminated(awaitable.child_id)

    def on_child_terminated(self, child_id: str) -> None:
        """Idempotent under redelivery: unknown or resolved children are ignored."""
        if self.is_terminal or self.state is not ProcessState.WAITING:
            return
        matched = None
        for awaitable in self._awaitables:
            if awaitable.child_id == child_id and not awaitable.resolved:
                matched = awaitable
                break
        if matched is None:
            self.log("INFO", f"ignoring terminated event for unknown or already "
                             f"resolved child {child_id}")
            return
        matched.resolved = True
        self.runner.unsubscribe_child(self, child_id)
        if all(a.resolved for a in self._awaitables):
            self._apply_awaitables()
            self.transition_to(ProcessState.RUNNING)
            self.runner.call_soon(self._step_callback, process=self)
        else:
            self.persist()

    def _apply_awaitables(self) -> None:
        # Registration order, not completion order.
        for awaitable in self._awaitables:
            proxy = NodeProxy(self.runner.store, awaitable.child_id)
            if awaitable.mode == "append":
                self.ctx.setdefault(awaitable.key, []).append(proxy)
            else:
                self.ctx[awaitable.key] = proxy
        self._awaitables = []

    def kill_children(self, reason: str) -> None:
        for awaitable in self._awaitables:
            if not awaitable.resolved:
                self.runner.kill_child(awaitable.child_id, reason)

    # -- persistence -----------------------------------------------------------

    def save_instance_state(self) -> dict:
        return {
            "ctx": encode(self.ctx.to_dict(), "context"),
            "cursor": self._cursor.to_doc(),
            "awaitables": [a.to_doc() for a in self._awaitables],
        }

    def load_instance_state(self, extras: dict) -> None:
        self.ctx = Context(decode(extras.get("ctx", {}), self.runner.store))
        self._cursor = OutlineCursor.from_doc(extras.get("cursor", [[[], 0]]))
        self._awaitables = [AwaitableRef.from_doc(doc)
                            for doc in extras.get("awaitables", [])]
