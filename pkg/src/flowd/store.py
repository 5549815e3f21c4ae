"""Embedded provenance store.

A log-structured store under a profile directory: every commit writes one
segment file via tmp-file + atomic rename, so a killed writer can never leave
a half-applied record behind. Multiple processes may share the store; commits
are serialized through an OS file lock and readers pick up new segments on
refresh. Checkpoints live in per-node files (latest version wins) and are
deleted on terminal transitions.
"""

from __future__ import annotations

import json
import os
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from filelock import FileLock

from .values import Value, from_stored, to_value

PROCESS_KINDS = ("calc_function", "work_function", "work_chain", "calc_job")
NODE_KINDS = ("data",) + PROCESS_KINDS
LINK_TYPES = ("INPUT", "CREATE", "RETURN", "CALL")
CALC_KINDS = ("calc_function", "calc_job")
WORK_KINDS = ("work_function", "work_chain")
TERMINAL_PROCESS_STATES = ("finished", "excepted", "killed")

CHECKPOINT_SCHEMA = 1


class StoreError(Exception):
    """Base error for store operations."""


class NotFoundError(StoreError):
    """Referenced node, checkpoint or record does not exist."""


class IntegrityError(StoreError):
    """A write would violate a provenance invariant."""


@dataclass
class NodeRecord:
    id: str
    seq: int
    kind: str
    ctime: float
    attributes: dict = field(default_factory=dict)

    @property
    def is_process(self) -> bool:
        return self.kind in PROCESS_KINDS

    def value(self) -> Value:
        if self.kind != "data":
            raise StoreError(f"node {self.id} is not a data node")
        val = from_stored(self.attributes["value_type"], self.attributes["value"])
        val.node_id = self.id
        return val


@dataclass(frozen=True)
class LinkRecord:
    source: str
    target: str
    link_type: str
    label: str


@dataclass(frozen=True)
class LogRecord:
    node: str
    level: str
    timestamp: float
    seq: int
    message: str


class Store:
    def __init__(self, path: str, sync: bool = True):
        self.path = os.path.abspath(path)
        self.sync = sync
        self._segments_dir = os.path.join(self.path, "segments")
        self._checkpoints_dir = os.path.join(self.path, "checkpoints")
        os.makedirs(self._segments_dir, exist_ok=True)
        os.makedirs(self._checkpoints_dir, exist_ok=True)
        self._lock = FileLock(os.path.join(self.path, "store.lock"))
        self._nodes: dict[str, NodeRecord] = {}
        self._by_seq: dict[int, str] = {}
        self._links: list[LinkRecord] = []
        self._links_in: dict[str, list[int]] = {}
        self._links_out: dict[str, list[int]] = {}
        self._logs: dict[str, list[LogRecord]] = {}
        self._applied_segments: set[str] = set()
        self._next_seq = 1
        self._next_log_seq = 1
        self.refresh()

    # -- segment plumbing ------------------------------------------------

    def _segment_files(self) -> list[str]:
        names = [n for n in os.listdir(self._segments_dir) if n.endswith(".json")]
        return sorted(names)

    def refresh(self) -> None:
        """Pick up records committed by other writers."""
        for name in self._segment_files():
            if name in self._applied_segments:
                continue
            full = os.path.join(self._segments_dir, name)
            with open(full, "r", encoding="utf-8") as handle:
                records = json.load(handle)
            for record in records:
                self._apply(record)
            self._applied_segments.add(name)

    def _commit(self, records: list[dict]) -> None:
        if not records:
            return
        existing = self._segment_files()
        if existing:
            highest = int(existing[-1].split(".")[0])
        else:
            highest = 0
        name = f"{highest + 1:010d}.json"
        tmp = os.path.join(self._segments_dir, f".tmp-{uuid.uuid4().hex}")
        with open(tmp, "w", encoding="utf-8") as handle:
            json.dump(records, handle, sort_keys=True)
            handle.flush()
            if self.sync:
                os.fsync(handle.fileno())
        os.replace(tmp, os.path.join(self._segments_dir, name))
        for record in records:
            self._apply(record)
        self._applied_segments.add(name)

    def _apply(self, record: dict) -> None:
        kind = record["t"]
        if kind == "node":
            node = NodeRecord(id=record["id"], seq=record["seq"], kind=record["kind"],
                              ctime=record["ctime"], attributes=record["attrs"])
            self._nodes[node.id] = node
            self._by_seq[node.seq] = node.id
            self._next_seq = max(self._next_seq, node.seq + 1)
        elif kind == "attr":
            self._nodes[record["node"]].attributes.update(record["set"])
        elif kind == "link":
            link = LinkRecord(record["source"], record["target"],
                              record["type"], record.get("label") or "")
            index = len(self._links)
            self._links.append(link)
            self._links_out.setdefault(link.source, []).append(index)
            self._links_in.setdefault(link.target, []).append(index)
        elif kind == "log":
            log = LogRecord(record["node"], record["level"], record["time"],
                            record["seq"], record["message"])
            self._logs.setdefault(log.node, []).append(log)
            self._next_log_seq = max(self._next_log_seq, log.seq + 1)
        else:
            raise StoreError(f"unknown record type {kind!r} in store segment")

    # -- node creation ----------------------------------------------------

    def create_data_node(self, value: Any) -> str:
        """Persist an immutable data node; returns the node id.

        Accepts a typed value or a raw Python object (auto-wrapped). If the
        value is already stored, the existing node id is returned unchanged.
        """
        wrapped = to_value(value)
        if wrapped.is_stored:
            return wrapped.node_id  # type: ignore[return-value]
        node_id = uuid.uuid4().hex
        attrs = {
            "value": wrapped.to_payload(),
            "value_type": wrapped.tag,
            "content_hash": wrapped.content_hash(),
        }
        with self._lock:
            self.refresh()
            record = {"t": "node", "id": node_id, "seq": self._next_seq,
                      "kind": "data", "ctime": time.time(), "attrs": attrs}
            self._commit([record])
        wrapped.node_id = node_id
        return node_id

    def create_process_node(self, kind: str, metadata: Optional[dict] = None) -> str:
        if kind not in PROCESS_KINDS:
            raise StoreError(f"unknown process kind {kind!r}")
        node_id = uuid.uuid4().hex
        attrs = {"process_state": "created"}
        for key, item in (metadata or {}).items():
            if item is not None:
                attrs[key] = item.value if isinstance(item, Value) else item
        with self._lock:
            self.refresh()
            record = {"t": "node", "id": node_id, "seq": self._next_seq,
                      "kind": kind, "ctime": time.time(), "attrs": attrs}
            self._commit([record])
        return node_id

    # -- attributes --------------------------------------------------------

    def set_attributes(self, node_id: str, attrs: dict) -> None:
        with self._lock:
            self.refresh()
            self._commit([self._attr_record(node_id, attrs)])

    def _attr_record(self, node_id: str, attrs: dict) -> dict:
        node = self._require(node_id)
        if "exit_status" in attrs and "exit_status" in node.attributes \
                and node.attributes.get("process_state") in TERMINAL_PROCESS_STATES:
            raise IntegrityError(
                f"exit_status of terminated process {node_id} is immutable")
        return {"t": "attr", "node": node_id, "set": attrs}

    # -- links ---------------------------------------------------------------

    def add_link(self, source: str, target: str, link_type: str, label: str = "") -> None:
        with self._lock:
            self.refresh()
            self._commit([self._link_record(source, target, link_type, label)])

    def _link_record(self, source: str, target: str, link_type: str, label: str) -> dict:
        src = self._require(source)
        tgt = self._require(target)
        if link_type not in LINK_TYPES:
            raise IntegrityError(f"unknown link type {link_type!r}")
        if link_type == "INPUT":
            if src.kind != "data" or not tgt.is_process:
                raise IntegrityError("INPUT links connect a data node to a process node")
        elif link_type == "CREATE":
            if src.kind not in CALC_KINDS or tgt.kind != "data":
                raise IntegrityError("CREATE links connect a calculation-type process "
                                     "to a data node")
            for index in self._links_in.get(target, ()):
                if self._links[index].link_type == "CREATE":
                    raise IntegrityError(
                        f"data node {target} already has a creating process")
        elif link_type == "RETURN":
            if src.kind not in WORK_KINDS or tgt.kind != "data":
                raise IntegrityError("RETURN links connect a workflow-type process "
                                     "to a data node")
        elif link_type == "CALL":
            if not src.is_process or not tgt.is_process:
                raise IntegrityError("CALL links connect two process nodes")
        if link_type in ("INPUT", "CREATE") and self._data_path_exists(target, source):
            raise IntegrityError(
                f"link {source} -> {target} would close a cycle in the data provenance")
        return {"t": "link", "source": source, "target": target,
                "type": link_type, "label": label}

    def _data_path_exists(self, start: str, goal: str) -> bool:
        """Reachability over the INPUT+CREATE subgraph."""
        seen = {start}
        frontier = [start]
        while frontier:
            current = frontier.pop()
            if current == goal:
                return True
            for index in self._links_out.get(current, ()):
                link = self._links[index]
                if link.link_type in ("INPUT", "CREATE") and link.target not in seen:
                    seen.add(link.target)
                    frontier.append(link.target)
        return False

    # -- batched writes ------------------------------------------------------

    def commit_batch(self, build: Callable[["BatchWriter"], None]) -> None:
        """Run `build` against a batch writer and commit its records atomically."""
        with self._lock:
            self.refresh()
            writer = BatchWriter(self)
            build(writer)
            self._commit(writer.records)

    # -- logs -----------------------------------------------------------------

    def append_log(self, node_id: str, level: str, message: str) -> None:
        with self._lock:
            self.refresh()
            self._require(node_id)
            record = {"t": "log", "node": node_id, "level": level,
                      "time": time.time(), "seq": self._next_log_seq,
                      "message": message}
            self._commit([record])

    def read_logs(self, node_id: str, level: str | None = None) -> list[LogRecord]:
        self.refresh()
        self._require(node_id)
        records = sorted(self._logs.get(node_id, []), key=lambda r: r.seq)
        if level is not None:
            records = [r for r in records if r.level == level]
        return records

    # -- checkpoints -----------------------------------------------------------

    def _checkpoint_path(self, node_id: str) -> str:
        return os.path.join(self._checkpoints_dir, f"{node_id}.json")

    def save_checkpoint(self, node_id: str, payload: dict) -> int:
        """Durably commit the checkpoint before returning; returns its version."""
        with self._lock:
            self.refresh()
            node = self._require(node_id)
            if not node.is_process:
                raise StoreError("checkpoints can only be saved for process nodes")
            version = 1
            path = self._checkpoint_path(node_id)
            if os.path.exists(path):
                with open(path, "r", encoding="utf-8") as handle:
                    version = json.load(handle).get("version", 0) + 1
            doc = {"schema": CHECKPOINT_SCHEMA, "version": version,
                   "node": node_id, "payload": payload}
            tmp = path + f".tmp-{uuid.uuid4().hex}"
            with open(tmp, "w", encoding="utf-8") as handle:
                json.dump(doc, handle, sort_keys=True)
                handle.flush()
                if self.sync:
                    os.fsync(handle.fileno())
            os.replace(tmp, path)
            return version

    def load_checkpoint(self, node_id: str) -> dict:
        self.refresh()
        self._require(node_id)
        path = self._checkpoint_path(node_id)
        if not os.path.exists(path):
            raise NotFoundError(f"no checkpoint for node {node_id}")
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
        if doc.get("schema") != CHECKPOINT_SCHEMA:
            raise StoreError(f"checkpoint for {node_id} has unsupported schema "
                             f"{doc.get('schema')!r} (expected {CHECKPOINT_SCHEMA})")
        return doc["payload"]

    def has_checkpoint(self, node_id: str) -> bool:
        return os.path.exists(self._checkpoint_path(node_id))

    def checkpoint_version(self, node_id: str) -> int:
        path = self._checkpoint_path(node_id)
        if not os.path.exists(path):
            return 0
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle).get("version", 0)

    def delete_checkpoint(self, node_id: str) -> None:
        try:
            os.unlink(self._checkpoint_path(node_id))
        except FileNotFoundError:
            pass

    # -- reads -------------------------------------------------------------------

    def _require(self, node_id: str) -> NodeRecord:
        node = self._nodes.get(node_id)
        if node is None:
            raise NotFoundError(f"unknown node {node_id}")
        return node

    def node(self, node_id: str) -> NodeRecord:
        self.refresh()
        return self._require(node_id)

    def has_node(self, node_id: str) -> bool:
        self.refresh()
        return node_id in self._nodes

    def resolve(self, ref: str | int) -> str:
        """Resolve a sequential id or a (possibly shortened) uuid to a node id."""
        self.refresh()
        if isinstance(ref, int) or (isinstance(ref, str) and ref.isdigit()):
            seq = int(ref)
            if seq in self._by_seq:
                return self._by_seq[seq]
            raise NotFoundError(f"no node with sequential id {seq}")
        matches = [node_id for node_id in self._nodes if node_id.startswith(ref)]
        if len(matches) == 1:
            return matches[0]
        if not matches:
            raise NotFoundError(f"no node matching {ref!r}")
        raise StoreError(f"ambiguous node reference {ref!r}")

    def nodes(self, kind: str | None = None) -> list[NodeRecord]:
        self.refresh()
        records = sorted(self._nodes.values(), key=lambda n: n.seq)
        if kind is not None:
            records = [n for n in records if n.kind == kind]
        return records

    def links(self, link_type: str | None = None) -> list[LinkRecord]:
        self.refresh()
        if link_type is None:
            return list(self._links)
        return [l for l in self._links if l.link_type == link_type]

    def traverse(self, node_id: str, direction: str,
                 link_types: Iterable[str] | None = None) -> list[tuple[LinkRecord, str]]:
        """One-hop neighborhood: (link, neighbor id) pairs under the filter."""
        self.refresh()
        self._require(node_id)
        if direction not in ("incoming", "outgoing"):
            raise StoreError(f"direction must be incoming or outgoing, got {direction!r}")
        allowed = set(link_types) if link_types is not None else None
        index = self._links_in if direction == "incoming" else self._links_out
        out = []
        for i in index.get(node_id, ()):
            link = self._links[i]
            if allowed is not None and link.link_type not in allowed:
                continue
            neighbor = link.source if direction == "incoming" else link.target
            out.append((link, neighbor))
        return out

    def closure(self, root_id: str) -> tuple[set[str], list[LinkRecord]]:
        """All nodes and links reachable from root over links in either direction."""
        self.refresh()
        self._require(root_id)
        seen = {root_id}
        frontier = [root_id]
        while frontier:
            current = frontier.pop()
            for index in self._links_out.get(current, []):
                other = self._links[index].target
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
            for index in self._links_in.get(current, []):
                other = self._links[index].source
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
        links = [l for l in self._links if l.source in seen and l.target in seen]
        return seen, links

    def outputs_of(self, node_id: str) -> dict[str, str]:
        """Output label -> data node id, over CREATE and RETURN links."""
        out = {}
        for link, neighbor in self.traverse(node_id, "outgoing", ("CREATE", "RETURN")):
            out[link.label] = neighbor
        return out

    # -- export --------------------------------------------------------------

    def to_dot(self, root_id: str | None = None) -> str:
        """Export the graph (or the closure of one node) in DOT format."""
        self.refresh()
        if root_id is not None:
            node_ids, links = self.closure(root_id)
        else:
            node_ids, links = set(self._nodes), list(self._links)
        lines = ["digraph provenance {"]
        for node_id in sorted(node_ids, key=lambda i: self._nodes[i].seq):
            node = self._nodes[node_id]
            lines.append(f'  n{node.seq} [label="{node.kind}:{node.seq}"];')
        for link in links:
            src = self._nodes[link.source].seq
            tgt = self._nodes[link.target].seq
            label = link.link_type if not link.label else f"{link.link_type}:{link.label}"
            lines.append(f'  n{src} -> n{tgt} [label="{label}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


class BatchWriter:
    """Collects records for a single-segment commit (one step's outputs)."""

    def __init__(self, store: Store):
        self._store = store
        self.records: list[dict] = []

    def set_attributes(self, node_id: str, attrs: dict) -> None:
        self.records.append(self._store._attr_record(node_id, attrs))

    def add_link(self, source: str, target: str, link_type: str, label: str = "") -> None:
        record = self._store._link_record(source, target, link_type, label)
        self.records.append(record)


class NodeProxy:
    """Live, read-only view of a store node; safe to hold in chain contexts."""

    def __init__(self, store: Store, node_id: str):
        self._store = store
        self.id = node_id

    @property
    def record(self) -> NodeRecord:
        return self._store.node(self.id)

    @property
    def kind(self) -> str:
        return self.record.kind

    @property
    def seq(self) -> int:
        return self.record.seq

    @property
    def attributes(self) -> dict:
        return dict(self.record.attributes)

    @property
    def process_state(self) -> str | None:
        return self.record.attributes.get("process_state")

    @property
    def exit_status(self) -> int | None:
        return self.record.attributes.get("exit_status")

    @property
    def exit_message(self) -> str | None:
        return self.record.attributes.get("exit_message")

    @property
    def is_terminal(self) -> bool:
        return self.process_state in TERMINAL_PROCESS_STATES

    @property
    def is_finished(self) -> bool:
        return self.process_state == "finished"

    @property
    def is_finished_ok(self) -> bool:
        return self.is_finished and self.exit_status == 0

    def value(self) -> Value:
        return self.record.value()

    @property
    def outputs(self) -> dict[str, Any]:
        """Output label -> value (data payload) or proxy for non-data nodes."""
        out = {}
        for label, node_id in self._store.outputs_of(self.id).items():
            record = self._store.node(node_id)
            out[label] = record.value() if record.kind == "data" else NodeProxy(self._store, node_id)
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, NodeProxy) and other.id == self.id

    def __hash__(self) -> int:
        return hash(self.id)

    def __repr__(self) -> str:
        return f"<NodeProxy {self.kind}:{self.id[:8]}>"
