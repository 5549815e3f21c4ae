"""Tagged JSON encoding for checkpoint payloads and persisted contexts.

Stored values serialize as node references; unstored typed values carry their
tag and payload inline. Plain JSON scalars and containers pass through.
Anything else is rejected with a clear error so that an unresumable process
fails at checkpoint time rather than at resume time.
"""

from __future__ import annotations

from typing import Any

from .store import NodeProxy, Store
from .values import Value, from_stored

NODE_KEY = "__node__"
VALUE_KEY = "__value__"
RESERVED = (NODE_KEY, VALUE_KEY)


class SerializationError(Exception):
    pass


def encode(obj: Any, where: str = "value") -> Any:
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    if isinstance(obj, Value):
        if obj.is_stored:
            return {NODE_KEY: obj.node_id}
        return {VALUE_KEY: {"type": obj.tag, "value": obj.to_payload()}}
    if isinstance(obj, NodeProxy):
        return {NODE_KEY: obj.id}
    if isinstance(obj, (list, tuple)):
        return [encode(item, f"{where}[{i}]") for i, item in enumerate(obj)]
    if isinstance(obj, dict):
        out = {}
        for key, item in obj.items():
            if not isinstance(key, str):
                raise SerializationError(f"{where}: mapping keys must be strings")
            if key in RESERVED:
                raise SerializationError(f"{where}: key {key!r} is reserved")
            out[key] = encode(item, f"{where}.{key}")
        return out
    raise SerializationError(
        f"{where}: {type(obj).__name__} is not storable; context and checkpoint "
        "values must be storable values, node references or plain JSON data")


def decode(doc: Any, store: Store) -> Any:
    if isinstance(doc, dict):
        if NODE_KEY in doc:
            node_id = doc[NODE_KEY]
            record = store.node(node_id)
            if record.kind == "data":
                return record.value()
            return NodeProxy(store, node_id)
        if VALUE_KEY in doc:
            spec = doc[VALUE_KEY]
            return from_stored(spec["type"], spec["value"])
        return {key: decode(item, store) for key, item in doc.items()}
    if isinstance(doc, list):
        return [decode(item, store) for item in doc]
    return doc
