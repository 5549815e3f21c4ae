"""Function processes: plain Python functions run as provenance-tracked
processes.

``@calc_function`` marks a function that creates new data from its inputs
(outputs get CREATE links); ``@work_function`` marks one that orchestrates
other processes and returns existing data (RETURN links, CALL links to
everything it invokes). Both execute synchronously in the caller's context
and are not checkpointable.
"""

from __future__ import annotations

import functools
import inspect
from typing import Any, Callable

from .process import (
    Process,
    create_process_record,
    current_caller,
    pop_caller,
    push_caller,
)
from .spec import ProcessSpec
from .states import EngineError, ProcessState
from .store import NodeProxy
from .values import Value, to_value


class FunctionProcess(Process):
    """Transient process wrapper for a single function invocation."""

    checkpointable = False

    def on_run(self) -> None:  # execution is driven inline by _invoke
        raise NotImplementedError


def _build_process_class(fn: Callable, kind: str, input_types: dict | None) -> type:
    input_types = input_types or {}
    signature = inspect.signature(fn)
    parameters = []
    dynamic = False
    for name, param in signature.parameters.items():
        if param.kind is inspect.Parameter.VAR_KEYWORD:
            dynamic = True
            continue
        if param.kind is inspect.Parameter.VAR_POSITIONAL:
            raise EngineError(f"{fn.__name__}: *args parameters are not supported "
                              "for function processes")
        parameters.append((name, param))

    def define(cls, spec: ProcessSpec) -> None:
        Process.define.__func__(cls, spec)
        spec.inputs.dynamic = dynamic
        spec.outputs.dynamic = True
        for name, param in parameters:
            attrs: dict[str, Any] = {}
            if name in input_types:
                attrs["valid_type"] = input_types[name]
            if param.default is not inspect.Parameter.empty:
                attrs["default"] = param.default
                attrs["required"] = False
            spec.input(name, **attrs)

    cls = type(
        f"{fn.__name__}_process",
        (FunctionProcess,),
        {
            "kind": kind,
            "define": classmethod(define),
            "__module__": fn.__module__,
            "__qualname__": f"{fn.__qualname__}_process",
        },
    )
    return cls


class ProcessFunction:
    """The decorated callable; invoking it runs the engine around the body."""

    def __init__(self, fn: Callable, kind: str, input_types: dict | None = None):
        self.fn = fn
        self.kind = kind
        self.process_class = _build_process_class(fn, kind, input_types)
        functools.update_wrapper(self, fn)

    def spec(self) -> ProcessSpec:
        return self.process_class.spec()

    def __call__(self, *args, **kwargs):
        result, _ = self.run_get_node(*args, **kwargs)
        return result

    def run_get_node(self, *args, **kwargs) -> tuple[Any, NodeProxy]:
        from .runner import current_runner

        runner = current_runner()
        raw_inputs = self._bind(args, kwargs)
        validation = self.spec().inputs.validate(raw_inputs)
        validation.raise_for_errors()
        resolved = validation.resolved
        caller = current_caller()
        node_id = create_process_record(runner.store, self.process_class,
                                        resolved, caller)
        proc = self.process_class(runner, node_id, resolved)
        proc.transition_to(ProcessState.RUNNING)
        call_args = {key: item for key, item in resolved.items() if key != "metadata"}
        token = push_caller(node_id)
        try:
            returned = self.fn(**call_args)
        except Exception as exc:
            proc.fail_with_exception(exc)
            raise
        finally:
            pop_caller(token)
        try:
            outputs = self._record_outputs(proc, returned)
        except Exception as exc:
            proc.fail_with_exception(exc)
            raise
        proc.finish(0)
        result: Any
        if returned is None:
            result = None
        elif isinstance(returned, dict):
            result = outputs
        else:
            result = outputs["result"]
        return result, NodeProxy(runner.store, node_id)

    def _bind(self, args, kwargs) -> dict:
        bound = inspect.signature(self.fn).bind(*args, **kwargs)
        raw: dict[str, Any] = {}
        for name, item in bound.arguments.items():
            param = inspect.signature(self.fn).parameters[name]
            if param.kind is inspect.Parameter.VAR_KEYWORD:
                raw.update(item)
            else:
                raw[name] = item
        return raw

    def _record_outputs(self, proc: FunctionProcess, returned) -> dict[str, Value]:
        if returned is None:
            return {}
        named = returned if isinstance(returned, dict) else {"result": returned}
        outputs: dict[str, Value] = {}
        for label, item in named.items():
            value = to_value(item)
            if self.kind == "calc_function":
                if value.is_stored:
                    raise EngineError(
                        f"calculation function {self.fn.__name__} returned the "
                        f"already stored node {value.node_id} under {label!r}; "
                        "calculation functions create new data")
            else:
                if not value.is_stored:
                    raise EngineError(
                        f"work function {self.fn.__name__} returned unstored data "
                        f"under {label!r}; workflows orchestrate existing data, "
                        "they do not create it")
            proc.out(label, value)
            outputs[label] = value
        proc.commit_outputs()
        return outputs


def calc_function(fn: Callable | None = None, *, input_types: dict | None = None):
    """Turn a plain function into a data-creating calculation process."""
    def wrap(func):
        return ProcessFunction(func, "calc_function", input_types)

    return wrap(fn) if fn is not None else wrap


def work_function(fn: Callable | None = None, *, input_types: dict | None = None):
    """Turn a plain function into an orchestration process."""
    def wrap(func):
        return ProcessFunction(func, "work_function", input_types)

    return wrap(fn) if fn is not None else wrap
