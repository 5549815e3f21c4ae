"""Declarative process specifications.

A specification holds two port trees (inputs and outputs), the known failure
modes (exit codes) and, for work chains, the control-flow outline. Port
declarations are purely declarative: later declarations fully replace earlier
ones at the same path.
"""

from __future__ import annotations

import copy
import re
from collections import namedtuple
from typing import Any, Callable, Iterable, Optional

from .values import Value, ValueError_, to_value

PATH_KEY_RE = re.compile(r"^[a-zA-Z_][a-zA-Z0-9_]*$")

ExitCode = namedtuple("ExitCode", ["status", "label", "message"])


class SpecError(Exception):
    """A malformed declaration on a process specification."""


_VALIDATORS: dict[str, Callable] = {}


def register_validator(name: str, fn: Callable | None = None):
    """Register a named validator usable in port declarations.

    Can be used as ``register_validator("name", fn)`` or as a decorator.
    """
    def _apply(func):
        _VALIDATORS[name] = func
        return func

    if fn is not None:
        return _apply(fn)
    return _apply


def _resolve_validator(spec_validator) -> Callable | None:
    if spec_validator is None:
        return None
    if callable(spec_validator):
        return spec_validator
    try:
        return _VALIDATORS[spec_validator]
    except KeyError:
        raise SpecError(f"validator {spec_validator!r} is not registered") from None


def _normalize_types(valid_type) -> tuple[str, ...]:
    """Accept Value classes, tag strings, or iterables thereof."""
    if valid_type is None:
        return ()
    if isinstance(valid_type, (str, type)):
        valid_type = (valid_type,)
    tags = []
    for item in valid_type:
        if isinstance(item, type) and issubclass(item, Value):
            tags.append(item.tag)
        elif isinstance(item, str):
            tags.append(item)
        else:
            raise SpecError(f"invalid entry in valid_type: {item!r}")
    return tuple(tags)


def split_path(path: str) -> list[str]:
    if not path:
        raise SpecError("port path must not be empty")
    keys = path.split(".")
    for key in keys:
        if not PATH_KEY_RE.match(key):
            raise SpecError(f"invalid port key {key!r} in path {path!r}")
    return keys


class ValidationResult:
    """Outcome of validating a value tree against a port tree."""

    def __init__(self, errors: list[tuple[str, str]], resolved: dict):
        self.errors = errors
        self.resolved = resolved

    @property
    def valid(self) -> bool:
        return not self.errors

    def raise_for_errors(self) -> None:
        if self.errors:
            lines = "; ".join(f"{path or '<root>'}: {msg}" for path, msg in self.errors)
            raise PortValidationError(lines, self.errors)

    def __repr__(self):
        state = "valid" if self.valid else f"invalid ({len(self.errors)} errors)"
        return f"<ValidationResult {state}>"


class PortValidationError(Exception):
    def __init__(self, message: str, errors: list[tuple[str, str]]):
        super().__init__(message)
        self.errors = errors


class Port:
    """A single typed gateway for one input or output value."""

    def __init__(self, valid_type=None, validator=None, default=None,
                 required: bool | None = None, non_db: bool = False):
        self.valid_types = _normalize_types(valid_type)
        self.validator = validator
        self.default = default
        self.non_db = non_db
        if required is None:
            required = default is None
        self.required = required
        if default is not None and self.valid_types:
            wrapped = self._wrap(default)
            if wrapped is None or wrapped.tag not in self.valid_types:
                raise SpecError(
                    f"default {default!r} does not satisfy valid types {self.valid_types}")

    @staticmethod
    def _wrap(candidate) -> Value | None:
        try:
            return to_value(candidate)
        except ValueError_:
            return None

    def check_type(self, candidate, path: str) -> tuple[Value | Any, list[tuple[str, str]]]:
        if not self.valid_types and self.non_db:
            return candidate, []  # non-storable values allowed through untyped non_db ports
        wrapped = self._wrap(candidate)
        if wrapped is None:
            return candidate, [(path, f"value of type {type(candidate).__name__} is not storable")]
        if self.valid_types and wrapped.tag not in self.valid_types:
            return wrapped, [(path, f"value of type {wrapped.tag!r} not in accepted "
                                    f"types {sorted(self.valid_types)}")]
        return wrapped, []

    def clone(self) -> "Port":
        return copy.deepcopy(self)

    def describe(self) -> dict:
        out: dict[str, Any] = {"kind": "port"}
        if self.valid_types:
            out["valid_types"] = sorted(self.valid_types)
        if self.default is not None:
            default = self.default
            out["default"] = default.value if isinstance(default, Value) else default
        out["required"] = self.required
        if self.non_db:
            out["non_db"] = True
        if self.validator is not None:
            name = self.validator if isinstance(self.validator, str) \
                else getattr(self.validator, "__name__", "<validator>")
            out["validator"] = name
        return out


class PortNamespace(Port):
    """A container of ports; itself a port, so namespaces nest freely."""

    def __init__(self, dynamic: bool = False, required: bool = True, **kwargs):
        super().__init__(required=required, **kwargs)
        self.dynamic = dynamic
        self.children: dict[str, Port] = {}

    # -- tree manipulation ---------------------------------------------------

    def _descend(self, keys: list[str], create: bool) -> "PortNamespace":
        """Walk to the namespace holding keys[-1], creating intermediates."""
        ns = self
        for key in keys[:-1]:
            child = ns.children.get(key)
            if child is None:
                if not create:
                    raise SpecError(f"namespace {key!r} does not exist")
                child = PortNamespace()
                ns.children[key] = child
            elif not isinstance(child, PortNamespace):
                raise SpecError(f"cannot descend through port {key!r}: it is not a namespace")
            ns = child
        return ns

    def set_port(self, path: str, port: Port) -> None:
        keys = split_path(path)
        ns = self._descend(keys, create=True)
        existing = ns.children.get(keys[-1])
        if isinstance(existing, PortNamespace) and not isinstance(port, PortNamespace):
            raise SpecError(f"cannot declare port {path!r}: a namespace exists at that path")
        if existing is not None and not isinstance(existing, PortNamespace) \
                and isinstance(port, PortNamespace):
            raise SpecError(f"cannot declare namespace {path!r}: a port exists at that path")
        if isinstance(existing, PortNamespace) and isinstance(port, PortNamespace):
            # Re-declared namespace: override its own attributes, keep children.
            port.children = existing.children
        ns.children[keys[-1]] = port

    def create_namespace(self, path: str, **attrs) -> "PortNamespace":
        keys = split_path(path)
        ns = self
        for key in keys[:-1]:
            child = ns.children.get(key)
            if child is None:
                child = PortNamespace()
                ns.children[key] = child
            elif not isinstance(child, PortNamespace):
                raise SpecError(f"cannot create namespace through port {key!r}")
            ns = child
        self.set_port(path, PortNamespace(**attrs))
        return self.get_port(path)  # type: ignore[return-value]

    def get_port(self, path: str) -> Port:
        keys = split_path(path)
        ns = self._descend(keys, create=False)
        try:
            return ns.children[keys[-1]]
        except KeyError:
            raise SpecError(f"no port declared at {path!r}") from None

    def has_port(self, path: str) -> bool:
        try:
            self.get_port(path)
            return True
        except SpecError:
            return False

    def walk(self, prefix: str = "") -> Iterable[tuple[str, Port]]:
        """Yield (period path, port) pairs for every declared port, leaves last."""
        for key, child in self.children.items():
            path = f"{prefix}.{key}" if prefix else key
            yield path, child
            if isinstance(child, PortNamespace):
                yield from child.walk(path)

    # -- validation ----------------------------------------------------------

    def validate(self, values: Optional[dict]) -> ValidationResult:
        """Recursively validate a nested mapping of candidate values.

        The result carries the resolved values: raw entries wrapped into typed
        values and defaults (deep-copied) filled in for absent optional ports.
        Validators run in a second pass and see the full resolved tree.
        """
        errors: list[tuple[str, str]] = []
        resolved = self._resolve(values or {}, "", errors)
        if not errors:
            self._run_validators(resolved, resolved, "", errors)
        return ValidationResult(errors, resolved)

    def _resolve(self, values: dict, prefix: str, errors: list) -> dict:
        if not isinstance(values, dict):
            errors.append((prefix, "expected a mapping of port values"))
            return {}
        resolved: dict[str, Any] = {}
        for key, child in self.children.items():
            path = f"{prefix}.{key}" if prefix else key
            if key in values:
                supplied = values[key]
                if isinstance(child, PortNamespace):
                    resolved[key] = child._resolve(supplied, path, errors)
                else:
                    wrapped, errs = child.check_type(supplied, path)
                    errors.extend(errs)
                    resolved[key] = wrapped
            elif isinstance(child, PortNamespace):
                if child.required:
                    sub = child._resolve({}, path, errors)
                    if sub:
                        resolved[key] = sub
            elif child.default is not None:
                wrapped, errs = child.check_type(copy.deepcopy(child.default), path)
                errors.extend(errs)
                resolved[key] = wrapped
            elif child.required:
                errors.append((path, "required port has no value and no default"))
        for key in values:
            if key in self.children:
                continue
            path = f"{prefix}.{key}" if prefix else key
            if not self.dynamic:
                errors.append((path, "value supplied for undeclared port in a "
                                     "non-dynamic namespace"))
                continue
            resolved[key] = self._resolve_dynamic(values[key], path, errors)
        return resolved

    def _resolve_dynamic(self, supplied, path: str, errors: list):
        if isinstance(supplied, dict):
            out = {}
            for key, item in supplied.items():
                out[key] = self._resolve_dynamic(item, f"{path}.{key}", errors)
            return out
        wrapped, errs = self.check_type(supplied, path)
        errors.extend(errs)
        return wrapped

    def _run_validators(self, resolved_here: dict, full: dict, prefix: str, errors: list):
        if self.validator is not None:
            message = _resolve_validator(self.validator)(resolved_here, full)
            if message is not None:
                errors.append((prefix, str(message)))
        for key, child in self.children.items():
            path = f"{prefix}.{key}" if prefix else key
            if key not in resolved_here:
                continue
            if isinstance(child, PortNamespace):
                child._run_validators(resolved_here[key], full, path, errors)
            elif child.validator is not None:
                message = _resolve_validator(child.validator)(resolved_here[key], full)
                if message is not None:
                    errors.append((path, str(message)))

    def describe(self) -> dict:
        out = super().describe()
        out["kind"] = "namespace"
        if self.dynamic:
            out["dynamic"] = True
        out["ports"] = {key: child.describe() for key, child in sorted(self.children.items())}
        return out


def validate(tree: PortNamespace, values: Optional[dict]) -> ValidationResult:
    return tree.validate(values)


class ProcessSpec:
    """Inputs, outputs and exit codes of one process class."""

    def __init__(self, name: str | None = None):
        self.name = name
        self.inputs = PortNamespace()
        self.outputs = PortNamespace(required=False)
        self.exit_codes: dict[str, ExitCode] = {}
        # (source name, namespace or None) -> top-level keys copied over
        self.exposed: dict[tuple[str, str | None], list[str]] = {}

    # -- declaration methods ---------------------------------------------

    def input(self, path: str, **attrs) -> None:
        self.inputs.set_port(path, Port(**attrs))

    def output(self, path: str, **attrs) -> None:
        attrs.setdefault("required", True)
        self.outputs.set_port(path, Port(**attrs))

    def input_namespace(self, path: str, **attrs) -> None:
        self.inputs.create_namespace(path, **attrs)

    def output_namespace(self, path: str, **attrs) -> None:
        self.outputs.create_namespace(path, **attrs)

    def exit_code(self, status: int, label: str, message: str) -> None:
        if not isinstance(status, int) or status <= 0:
            raise SpecError("exit status must be a positive integer (0 is reserved "
                            "for success)")
        if label in self.exit_codes:
            raise SpecError(f"exit code label {label!r} already declared")
        self.exit_codes[label] = ExitCode(status, label, message)

    # -- exposing ----------------------------------------------------------

    def expose_inputs(self, source, namespace: str | None = None,
                      include: list[str] | None = None,
                      exclude: list[str] | None = None) -> None:
        self._expose("inputs", source, namespace, include, exclude)

    def expose_outputs(self, source, namespace: str | None = None,
                       include: list[str] | None = None,
                       exclude: list[str] | None = None) -> None:
        self._expose("outputs", source, namespace, include, exclude)

    def _expose(self, direction: str, source, namespace, include, exclude) -> None:
        if include is not None and exclude is not None:
            raise SpecError("include and exclude are mutually exclusive")
        source_spec = source.spec() if hasattr(source, "spec") else source
        source_tree: PortNamespace = getattr(source_spec, direction)
        target_tree: PortNamespace = getattr(self, direction)
        if namespace is not None:
            target_tree.create_namespace(namespace)
        copied: list[str] = []
        for key, port in source_tree.children.items():
            if key == "metadata":
                continue  # engine-owned namespace, never exposed
            if include is not None and key not in include:
                continue
            if exclude is not None and key in exclude:
                continue
            path = f"{namespace}.{key}" if namespace else key
            target_tree.set_port(path, port.clone())
            copied.append(key)
        name = source_spec.name or "<anonymous>"
        self.exposed[(name, namespace)] = copied

    def exposed_inputs(self, resolved: dict, source, namespace: str | None = None) -> dict:
        """Extract from resolved input values the ports exposed from `source`."""
        source_spec = source.spec() if hasattr(source, "spec") else source
        name = source_spec.name or "<anonymous>"
        try:
            keys = self.exposed[(name, namespace)]
        except KeyError:
            raise SpecError(f"no ports were exposed from {name!r} "
                            f"under namespace {namespace!r}") from None
        scope = resolved
        if namespace is not None:
            for part in split_path(namespace):
                scope = scope.get(part, {})
        return {key: scope[key] for key in keys if key in scope}

    # -- introspection -------------------------------------------------------

    def get_exit_code(self, label: str) -> ExitCode:
        try:
            return self.exit_codes[label]
        except KeyError:
            raise SpecError(f"no exit code labelled {label!r}") from None

    def describe(self) -> dict:
        return {
            "name": self.name,
            "inputs": self.inputs.describe(),
            "outputs": self.outputs.describe(),
            "exit_codes": {
                label: {"status": code.status, "message": code.message}
                for label, code in sorted(self.exit_codes.items())
            },
        }

    def to_text(self) -> str:
        """Canonical textual document with stable key ordering."""
        import json

        return json.dumps(self.describe(), indent=2, sort_keys=True)


class ExitCodesView:
    """Attribute access to declared exit codes, e.g. ``self.exit_codes.NOT_CONVERGED``."""

    def __init__(self, spec: ProcessSpec):
        self._spec = spec

    def __getattr__(self, label: str) -> ExitCode:
        return self._spec.get_exit_code(label)

    def __getitem__(self, label: str) -> ExitCode:
        return self._spec.get_exit_code(label)
