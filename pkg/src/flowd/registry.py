"""Process class registry.

Checkpoints reference process classes by qualified name; a worker resolving a
checkpoint imports the module and looks the class up. Classes defined in
importable modules need no explicit registration.
"""

from __future__ import annotations

import importlib

_REGISTRY: dict[str, type] = {}


def qualified_name(cls: type) -> str:
    return f"{cls.__module__}.{cls.__qualname__}"


def register_process(cls: type) -> type:
    _REGISTRY[qualified_name(cls)] = cls
    return cls


def registered_processes() -> dict[str, type]:
    return dict(_REGISTRY)


def resolve_process(name: str) -> type:
    if name in _REGISTRY:
        return _REGISTRY[name]
    module_name, _, attr = name.rpartition(".")
    if not module_name:
        raise LookupError(f"cannot resolve process class {name!r}")
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise LookupError(f"cannot import module for process {name!r}: {exc}") from exc
    target = module
    for part in attr.split("."):
        target = getattr(target, part, None)
        if target is None:
            raise LookupError(f"module {module_name!r} has no attribute {attr!r}")
    _REGISTRY[name] = target  # cache
    return target


def load_modules(names: list[str]) -> None:
    """Import modules listed in the profile so their process classes register."""
    for name in names:
        importlib.import_module(name)
