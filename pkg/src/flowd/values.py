"""Storable typed values.

Every piece of data that flows through a process port or ends up in the
provenance store is wrapped in a :class:`Value` subclass carrying a type tag.
The built-in set is closed (int, float, bool, str, list, dict, bytes, folder)
but new tags can be registered through :func:`register_value_type`.
"""

from __future__ import annotations

import base64
import hashlib
import json
from typing import Any, ClassVar


class ValueError_(Exception):
    """Raised for unstorable or badly typed values."""


_REGISTRY: dict[str, type["Value"]] = {}


def register_value_type(cls: type["Value"]) -> type["Value"]:
    """Register a Value subclass under its tag. Usable as a decorator."""
    if not cls.tag:
        raise ValueError_(f"{cls.__name__} does not define a type tag")
    _REGISTRY[cls.tag] = cls
    return cls


def value_type(tag: str) -> type["Value"]:
    try:
        return _REGISTRY[tag]
    except KeyError:
        raise ValueError_(f"unknown value type tag {tag!r}") from None


def known_tags() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


class Value:
    """A typed, storable value. Immutable once stored."""

    tag: ClassVar[str] = ""

    def __init__(self, value: Any):
        self._value = self._coerce(value)
        self.node_id: str | None = None  # set by the store when persisted

    def _coerce(self, raw: Any) -> Any:
        return raw

    @property
    def value(self) -> Any:
        return self._value

    @property
    def is_stored(self) -> bool:
        return self.node_id is not None

    def to_payload(self) -> Any:
        """JSON-ready representation of the wrapped value."""
        return self._value

    @classmethod
    def from_payload(cls, payload: Any) -> "Value":
        return cls(payload)

    def content_hash(self) -> str:
        doc = json.dumps({"type": self.tag, "value": self.to_payload()},
                         sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()

    def __repr__(self) -> str:
        suffix = f", node={self.node_id[:8]}" if self.node_id else ""
        return f"{type(self).__name__}({self._value!r}{suffix})"

    def __eq__(self, other: Any) -> bool:
        if isinstance(other, Value):
            return self.tag == other.tag and self._value == other._value
        return self._value == other

    def __hash__(self) -> int:
        return hash((self.tag, json.dumps(self.to_payload(), sort_keys=True, default=str)))

    # Arithmetic mirrors the underlying value and re-wraps the result so that
    # expressions like add(a, b) -> a + b stay inside the typed world.
    def _binop(self, other: Any, op) -> "Value":
        rhs = other.value if isinstance(other, Value) else other
        return to_value(op(self._value, rhs))

    def __add__(self, other):
        return self._binop(other, lambda a, b: a + b)

    def __sub__(self, other):
        return self._binop(other, lambda a, b: a - b)

    def __mul__(self, other):
        return self._binop(other, lambda a, b: a * b)

    def __truediv__(self, other):
        return self._binop(other, lambda a, b: a / b)

    def __floordiv__(self, other):
        return self._binop(other, lambda a, b: a // b)

    def __mod__(self, other):
        return self._binop(other, lambda a, b: a % b)

    def _cmp(self, other: Any, op) -> bool:
        rhs = other.value if isinstance(other, Value) else other
        return op(self._value, rhs)

    def __lt__(self, other):
        return self._cmp(other, lambda a, b: a < b)

    def __le__(self, other):
        return self._cmp(other, lambda a, b: a <= b)

    def __gt__(self, other):
        return self._cmp(other, lambda a, b: a > b)

    def __ge__(self, other):
        return self._cmp(other, lambda a, b: a >= b)


@register_value_type
class Int(Value):
    tag = "int"

    def _coerce(self, raw):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ValueError_(f"Int expects an int, got {type(raw).__name__}")
        return raw


@register_value_type
class Float(Value):
    tag = "float"

    def _coerce(self, raw):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ValueError_(f"Float expects a number, got {type(raw).__name__}")
        return float(raw)


@register_value_type
class Bool(Value):
    tag = "bool"

    def _coerce(self, raw):
        if not isinstance(raw, bool):
            raise ValueError_(f"Bool expects a bool, got {type(raw).__name__}")
        return raw


@register_value_type
class Str(Value):
    tag = "str"

    def _coerce(self, raw):
        if not isinstance(raw, str):
            raise ValueError_(f"Str expects a str, got {type(raw).__name__}")
        return raw


@register_value_type
class List(Value):
    tag = "list"

    def _coerce(self, raw):
        if not isinstance(raw, (list, tuple)):
            raise ValueError_(f"List expects a list, got {type(raw).__name__}")
        return [_plain(item) for item in raw]


@register_value_type
class Dict(Value):
    tag = "dict"

    def _coerce(self, raw):
        if not isinstance(raw, dict):
            raise ValueError_(f"Dict expects a dict, got {type(raw).__name__}")
        return {str(k): _plain(v) for k, v in raw.items()}


@register_value_type
class Bytes(Value):
    tag = "bytes"

    def _coerce(self, raw):
        if not isinstance(raw, (bytes, bytearray)):
            raise ValueError_(f"Bytes expects bytes, got {type(raw).__name__}")
        return bytes(raw)

    def to_payload(self):
        return base64.b64encode(self._value).decode("ascii")

    @classmethod
    def from_payload(cls, payload):
        return cls(base64.b64decode(payload))


@register_value_type
class Folder(Value):
    """A named collection of small text files, e.g. retrieved job output."""

    tag = "folder"

    def _coerce(self, raw):
        if not isinstance(raw, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in raw.items()
        ):
            raise ValueError_("Folder expects a mapping of file name to text content")
        return dict(raw)

    @property
    def files(self) -> dict[str, str]:
        return dict(self._value)

    def read(self, name: str) -> str:
        return self._value[name]


def _plain(obj: Any) -> Any:
    """Flatten nested Values/containers into plain JSON-compatible data."""
    if isinstance(obj, Value):
        return _plain(obj.value)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise ValueError_(f"value of type {type(obj).__name__} is not storable")


def to_value(obj: Any) -> Value:
    """Wrap a raw Python object in the matching Value type.

    Values pass through unchanged; anything else must map onto a built-in tag.
    """
    if isinstance(obj, Value):
        return obj
    if isinstance(obj, bool):
        return Bool(obj)
    if isinstance(obj, int):
        return Int(obj)
    if isinstance(obj, float):
        return Float(obj)
    if isinstance(obj, str):
        return Str(obj)
    if isinstance(obj, (list, tuple)):
        return List(obj)
    if isinstance(obj, dict):
        return Dict(obj)
    if isinstance(obj, (bytes, bytearray)):
        return Bytes(obj)
    raise ValueError_(f"cannot store a value of type {type(obj).__name__}")


def from_stored(tag: str, payload: Any) -> Value:
    return value_type(tag).from_payload(payload)
