"""Process base class.

Every engine-runnable entity (function process, work chain, calculation job)
shares this machinery: a finite-state machine with transition hooks, exception
capture into the terminal excepted state, kill/pause/play control, checkpoint
emission on state transitions and buffered output recording.
"""

from __future__ import annotations

import contextvars
import traceback
from typing import Any, ClassVar

from .registry import qualified_name, register_process
from .serialize import encode, decode
from .spec import ExitCodesView, PortNamespace, ProcessSpec, SpecError
from .states import (
    EngineError,
    ProcessState,
    check_transition,
    is_terminal,
)
from .values import Value, to_value

# Shadow call stack: the provenance node of the process executing in this
# context; CALL links always originate from the frame active at call time.
_CALL_STACK: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar(
    "flowd_call_stack", default=())


def current_caller() -> str | None:
    stack = _CALL_STACK.get()
    return stack[-1] if stack else None


def push_caller(node_id: str):
    return _CALL_STACK.set(_CALL_STACK.get() + (node_id,))


def pop_caller(token) -> None:
    _CALL_STACK.reset(token)


class OutputError(EngineError):
    """An emitted output violates the output port declarations."""


class ControlError(EngineError):
    """A control request (kill/pause/play) was rejected."""


class TerminalReport:
    """What a finished, excepted or killed process looks like from outside."""

    def __init__(self, node_id: str, state: ProcessState,
                 exit_status: int | None, exit_message: str | None,
                 outputs: dict[str, Any]):
        self.node_id = node_id
        self.state = state
        self.exit_status = exit_status
        self.exit_message = exit_message
        self.outputs = outputs

    @property
    def is_finished_ok(self) -> bool:
        return self.state is ProcessState.FINISHED and self.exit_status == 0

    def __repr__(self):
        return (f"TerminalReport(state={self.state.value}, "
                f"exit_status={self.exit_status})")


class Process:
    kind: ClassVar[str] = ""
    checkpointable: ClassVar[bool] = True
    spec_class: ClassVar[type] = ProcessSpec

    # -- specification -----------------------------------------------------

    @classmethod
    def define(cls, spec: ProcessSpec) -> None:
        spec.input_namespace("metadata", required=False)
        spec.inputs.get_port("metadata").children["label"] = _metadata_port()
        spec.inputs.get_port("metadata").children["description"] = _metadata_port()

    @classmethod
    def spec(cls) -> ProcessSpec:
        cached = cls.__dict__.get("_spec_instance")
        if cached is None:
            cached = cls.spec_class(name=qualified_name(cls))
            cls.define(cached)
            cls._spec_instance = cached
        return cached

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.kind:
            register_process(cls)

    # -- construction --------------------------------------------------------

    def __init__(self, runner, node_id: str, inputs: dict,
                 state: ProcessState = ProcessState.CREATED):
        self.runner = runner
        self.node_id = node_id
        self.inputs = inputs
        self._state = state
        self.paused = False
        self.pause_message: str | None = None
        self._exit_status: int | None = None
        self._exit_message: str | None = None
        self._pending_outputs: list[tuple[str, Any]] = []
        self._emitted_outputs: set[str] = set()

    # -- state machine ---------------------------------------------------------

    @property
    def state(self) -> ProcessState:
        return self._state

    @property
    def is_terminal(self) -> bool:
        return is_terminal(self._state)

    @property
    def exit_codes(self) -> ExitCodesView:
        return ExitCodesView(self.spec())

    def transition_to(self, new_state: ProcessState) -> None:
        """Drive one FSM edge, firing hooks in order: exiting, entering, entered."""
        check_transition(self._state, new_state)
        previous = self._state
        self.on_exiting()
        self.on_entering(new_state)
        self._state = new_state
        self.on_entered(previous)

    # Hooks. Subclasses extending them must call super().

    def on_exiting(self) -> None:
        pass

    def on_entering(self, state: ProcessState) -> None:
        pass

    def on_entered(self, from_state: ProcessState) -> None:
        attrs: dict[str, Any] = {"process_state": self._state.value}
        if self._state is ProcessState.FINISHED:
            attrs["exit_status"] = self._exit_status if self._exit_status is not None else 0
            if self._exit_message is not None:
                attrs["exit_message"] = self._exit_message
        elif self._state in (ProcessState.EXCEPTED, ProcessState.KILLED):
            if self._exit_message is not None:
                attrs["exit_message"] = self._exit_message
        if self.is_terminal:
            attrs["terminal_sim_time"] = self.runner.clock.now()
            attrs.update(self.terminal_extras())
        self.runner.store.set_attributes(self.node_id, attrs)
        if self.is_terminal:
            self.runner.store.delete_checkpoint(self.node_id)
        elif self.checkpointable:
            self.persist()
        self.runner.emit_state_change(self, from_state, self._state)
        if self.is_terminal:
            self.runner.process_terminated(self)

    def terminal_extras(self) -> dict:
        """Extra attributes persisted on the terminal transition."""
        return {}

    # -- outcomes -----------------------------------------------------------------

    def finish(self, status: int = 0, message: str | None = None) -> None:
        self._exit_status = status
        if message is not None:
            self._exit_message = message
        self.transition_to(ProcessState.FINISHED)

    def fail_with_exception(self, exc: BaseException) -> None:
        """Capture an exception: log the stack trace, land in excepted."""
        trace = traceback.format_exc()
        try:
            self.runner.store.append_log(self.node_id, "ERROR", trace)
        except Exception:
            pass
        self._exit_message = f"{type(exc).__name__}: {exc}"
        if self.is_terminal:
            return
        try:
            self.transition_to(ProcessState.EXCEPTED)
        except Exception:
            # A hook failing while excepting must not escape; force the state.
            self._state = ProcessState.EXCEPTED
            try:
                self.runner.store.set_attributes(
                    self.node_id,
                    {"process_state": "excepted", "exit_message": self._exit_message})
                self.runner.store.delete_checkpoint(self.node_id)
                self.runner.process_terminated(self)
            except Exception:
                pass

    def kill(self, reason: str = "killed by user") -> bool:
        """Terminate prematurely; returns False when already terminal."""
        if self.is_terminal:
            return False
        try:
            self.kill_children(reason)
        except Exception:
            pass
        self._exit_message = reason
        self.transition_to(ProcessState.KILLED)
        return True

    def kill_children(self, reason: str) -> None:
        pass

    def pause(self, message: str | None = None) -> bool:
        if self.is_terminal:
            return False
        self.paused = True
        self.pause_message = message
        attrs = {"paused": True}
        if message:
            attrs["pause_message"] = message
        self.runner.store.set_attributes(self.node_id, attrs)
        if self.checkpointable:
            self.persist()
        return True

    def play(self) -> bool:
        if not self.paused:
            return False
        self.paused = False
        self.pause_message = None
        self.runner.store.set_attributes(self.node_id, {"paused": False})
        self.on_played()
        return True

    def on_played(self) -> None:
        """Reschedule whatever pausing parked. Subclass hook."""

    # -- execution entry points (driven by the runner) ------------------------------

    def start(self) -> None:
        self.transition_to(ProcessState.RUNNING)
        self.on_run()

    def on_run(self) -> None:
        raise NotImplementedError

    def resume(self) -> None:
        """Continue after loading from a checkpoint. Subclass hook."""
        raise NotImplementedError

    # -- logging -------------------------------------------------------------

    def report(self, message: str) -> None:
        """Attach a human-readable event record to the process node."""
        self.runner.store.append_log(self.node_id, "REPORT", message)

    def log(self, level: str, message: str) -> None:
        self.runner.store.append_log(self.node_id, level, message)

    # -- outputs ---------------------------------------------------------------

    def out(self, label: str, value: Any) -> None:
        """Record an output in memory; committed and validated later."""
        self._pending_outputs.append((label, value))

    def commit_outputs(self) -> None:
        """Validate buffered outputs against the output ports and persist them.

        Calculation-type processes create their outputs (CREATE links);
        workflow-type processes return them (RETURN links), storing fresh
        creator-less data nodes for values that do not exist yet.
        """
        if not self._pending_outputs:
            return
        pending, self._pending_outputs = self._pending_outputs, []
        link_type = "CREATE" if self.kind in ("calc_function", "calc_job") else "RETURN"
        store = self.runner.store
        resolved: list[tuple[str, str]] = []
        for label, raw in pending:
            port = _lookup_output_port(self.spec().outputs, label)
            wrapped = to_value(raw)
            if port is not None and port.valid_types and wrapped.tag not in port.valid_types:
                raise OutputError(
                    f"output {label!r} of type {wrapped.tag!r} not accepted by "
                    f"port types {sorted(port.valid_types)}")
            node_id = store.create_data_node(wrapped)
            resolved.append((label, node_id))

        def build(writer):
            for label, node_id in resolved:
                writer.add_link(self.node_id, node_id, link_type, label)

        store.commit_batch(build)
        self._emitted_outputs.update(label for label, _ in resolved)

    def missing_required_outputs(self) -> list[str]:
        missing = []
        for path, port in self.spec().outputs.walk():
            if isinstance(port, PortNamespace):
                continue
            if port.required and path not in self._emitted_outputs:
                missing.append(path)
        return missing

    # -- persistence ----------------------------------------------------------

    def persist(self) -> None:
        if not self.checkpointable or self.is_terminal:
            return
        self.runner.store.save_checkpoint(self.node_id, self.checkpoint_payload())

    def checkpoint_payload(self) -> dict:
        return {
            "process": qualified_name(type(self)),
            "kind": self.kind,
            "state": self._state.value,
            "paused": self.paused,
            "inputs": encode(self.inputs, "inputs"),
            "emitted_outputs": sorted(self._emitted_outputs),
            "extras": self.save_instance_state(),
        }

    def save_instance_state(self) -> dict:
        return {}

    def load_instance_state(self, extras: dict) -> None:
        pass

    @classmethod
    def from_checkpoint(cls, runner, node_id: str, payload: dict) -> "Process":
        inputs = decode(payload["inputs"], runner.store)
        proc = cls(runner, node_id, inputs, state=ProcessState(payload["state"]))
        proc.paused = payload.get("paused", False)
        proc._emitted_outputs = set(payload.get("emitted_outputs", ()))
        proc.load_instance_state(payload.get("extras", {}))
        return proc

    # -- reporting --------------------------------------------------------------

    def terminal_report(self) -> TerminalReport:
        record = self.runner.store.node(self.node_id)
        outputs = {}
        for label, node_id in self.runner.store.outputs_of(self.node_id).items():
            node = self.runner.store.node(node_id)
            outputs[label] = node.value() if node.kind == "data" else node_id
        return TerminalReport(
            self.node_id, self._state,
            record.attributes.get("exit_status"),
            record.attributes.get("exit_message"),
            outputs,
        )


def _metadata_port():
    from .spec import Port

    return Port(valid_type=None, required=False, non_db=True)


def _lookup_output_port(outputs: PortNamespace, label: str):
    """Resolve an output label to its port, honoring dynamic namespaces.

    Returns the port, or None when the label lands in a dynamic namespace.
    Raises OutputError for undeclared labels in non-dynamic namespaces.
    """
    from .spec import split_path

    keys = split_path(label)
    namespace = outputs
    for depth, key in enumerate(keys):
        child = namespace.children.get(key)
        if child is None:
            if namespace.dynamic:
                return None
            raise OutputError(
                f"output label {label!r} is not declared and the namespace is "
                "not dynamic")
        if depth == len(keys) - 1:
            if isinstance(child, PortNamespace):
                raise OutputError(f"output label {label!r} addresses a namespace")
            return child
        if not isinstance(child, PortNamespace):
            raise OutputError(f"output label {label!r} descends through a port")
        namespace = child
    return None


# -- node creation -----------------------------------------------------------


def iter_value_leaves(tree: dict, prefix: str = ""):
    for key, item in tree.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(item, dict):
            yield from iter_value_leaves(item, path)
        else:
            yield path, item


def create_process_record(store, process_cls, resolved_inputs: dict,
                          caller_id: str | None = None) -> str:
    """Create the provenance node for a process: metadata attributes, stored
    inputs with INPUT links, and the CALL link from the active caller."""
    spec = process_cls.spec()
    metadata = resolved_inputs.get("metadata", {}) or {}
    attrs = {key: (item.value if isinstance(item, Value) else item)
             for key, item in metadata.items()}
    attrs["process_class"] = qualified_name(process_cls)
    node_id = store.create_process_node(process_cls.kind, attrs)
    for path, value in iter_value_leaves(resolved_inputs):
        if path == "metadata" or path.startswith("metadata."):
            continue
        try:
            port = spec.inputs.get_port(path)
        except SpecError:
            port = None
        if port is not None and port.non_db:
            continue
        if not isinstance(value, Value):
            value = to_value(value)
        data_id = store.create_data_node(value)
        store.add_link(data_id, node_id, "INPUT", path)
    if caller_id is not None:
        store.add_link(caller_id, node_id, "CALL")
    return node_id
