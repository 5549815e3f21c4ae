"""Deterministic test substrate.

Independent oracles and drivers used by the verification suite: a direct
recursive outline evaluator (checked against the engine's cursor machinery),
a provenance-graph isomorphism check, a DOT re-parser, store scanners, and
helpers for spawning broker/worker processes with kill/restart injection.
"""

from __future__ import annotations

import json
import os
import re
import signal
import subprocess
import sys
import time
from typing import Callable

import networkx as nx

from .config import Profile
from .outline import IfBlock, OutlineProgram, Step, While
from .store import Store


# -- reference outline evaluator -------------------------------------------------


def reference_outline_eval(program: OutlineProgram,
                           steps: dict[str, Callable],
                           conditions: dict[str, Callable],
                           ctx: dict) -> list[str]:
    """Direct recursive evaluation of an outline over scripted step effects.

    Deliberately independent of the engine's cursor interpreter: plain Python
    recursion, no serializable program counter. Returns the executed step-name
    trace.
    """
    trace: list[str] = []

    def run_block(block) -> None:
        for instr in block:
            if isinstance(instr, Step):
                steps[instr.name](ctx)
                trace.append(instr.name)
            elif isinstance(instr, While):
                while conditions[instr.condition](ctx):
                    run_block(instr.body)
            elif isinstance(instr, IfBlock):
                for cond, body in instr.branches:
                    if cond is None or conditions[cond](ctx):
                        run_block(body)
                        break
            else:
                raise TypeError(f"unknown outline instruction {instr!r}")

    run_block(program.root)
    return trace


def fizzbuzz_oracle(limit: int = 100) -> list[str]:
    """Brute-force fizzbuzz reports for 0..limit inclusive."""
    out = []
    for n in range(limit + 1):
        if n % 15 == 0:
            out.append("fizzbuzz")
        elif n % 3 == 0:
            out.append("fizz")
        elif n % 5 == 0:
            out.append("buzz")
        else:
            out.append(str(n))
    return out


# -- graph oracles ------------------------------------------------------------------


def provenance_graph(store: Store, root_id: str | None = None) -> nx.MultiDiGraph:
    """Kind/value-labelled multigraph of the store (or one node's closure)."""
    if root_id is not None:
        node_ids, links = store.closure(root_id)
    else:
        store.refresh()
        node_ids = {n.id for n in store.nodes()}
        links = store.links()
    graph = nx.MultiDiGraph()
    for node_id in node_ids:
        record = store.node(node_id)
        fingerprint = record.attributes.get("content_hash", "") \
            if record.kind == "data" else ""
        graph.add_node(node_id, kind=record.kind, fingerprint=fingerprint)
    for link in links:
        graph.add_edge(link.source, link.target,
                       link_type=link.link_type, label=link.label)
    return graph


def graph_isomorphic(a: nx.MultiDiGraph, b: nx.MultiDiGraph) -> bool:
    """Kind- and link-type/label-preserving isomorphism, ignoring ids/times.

    Data nodes additionally match on content hash so that resumed runs must
    reproduce identical values, not only identical shapes.
    """
    def node_match(left, right):
        return left["kind"] == right["kind"] and \
            left["fingerprint"] == right["fingerprint"]

    def edge_match(left, right):
        keys = sorted((d["link_type"], d["label"]) for d in left.values())
        other = sorted((d["link_type"], d["label"]) for d in right.values())
        return keys == other

    return nx.is_isomorphic(a, b, node_match=node_match, edge_match=edge_match)


_DOT_NODE = re.compile(r'^\s*(\w+)\s+\[label="([^"]*)"\];$')
_DOT_EDGE = re.compile(r'^\s*(\w+)\s+->\s+(\w+)\s+\[label="([^"]*)"\];$')


def parse_dot(text: str) -> tuple[set, set]:
    """Re-parse DOT export into (node labels, edge triples)."""
    nodes: set[str] = set()
    edges: set[tuple[str, str, str]] = set()
    names: dict[str, str] = {}
    for line in text.splitlines():
        match = _DOT_NODE.match(line)
        if match:
            names[match.group(1)] = match.group(2)
            nodes.add(match.group(2))
            continue
        match = _DOT_EDGE.match(line)
        if match:
            edges.add((names[match.group(1)], names[match.group(2)], match.group(3)))
    return nodes, edges


def normalized_context(store: Store, node_id: str):
    """The persisted final context with node references replaced by content.

    Run-specific identifiers cannot match across independent runs; identical
    context contents means identical values behind every reference.
    """
    attrs = store.node(node_id).attributes
    return _normalize_doc(store, attrs.get("context"))


def _normalize_doc(store: Store, doc):
    if isinstance(doc, dict):
        if "__node__" in doc:
            record = store.node(doc["__node__"])
            if record.kind == "data":
                return ("node", record.attributes.get("value_type"),
                        record.attributes.get("value"))
            return ("node", record.kind)
        return {k: _normalize_doc(store, v) for k, v in doc.items()}
    if isinstance(doc, list):
        return [_normalize_doc(store, v) for v in doc]
    return doc


def store_contains_value(store: Store, raw) -> bool:
    """Scan every data node payload for the given raw value."""
    store.refresh()
    for record in store.nodes(kind="data"):
        if record.attributes.get("value") == raw:
            return True
    return False


def data_acyclic(store: Store) -> bool:
    """Topological check of the INPUT+CREATE subgraph over the whole store."""
    graph = nx.DiGraph()
    store.refresh()
    for record in store.nodes():
        graph.add_node(record.id)
    for link in store.links():
        if link.link_type in ("INPUT", "CREATE"):
            graph.add_edge(link.source, link.target)
    return nx.is_directed_acyclic_graph(graph)


# -- scripted event traces --------------------------------------------------------------


class EventTrace:
    """Ordered (time, label) records; byte-identical across seeded reruns."""

    def __init__(self):
        self.events: list[tuple[float, str]] = []

    def record(self, when: float, label: str) -> None:
        self.events.append((when, label))

    def to_bytes(self) -> bytes:
        return json.dumps(self.events, separators=(",", ":")).encode()


# -- process orchestration helpers --------------------------------------------------------


def _repo_env(extra_pythonpath: str | None = None) -> dict:
    env = os.environ.copy()
    if extra_pythonpath:
        parts = [extra_pythonpath, env.get("PYTHONPATH", "")]
        env["PYTHONPATH"] = os.pathsep.join(p for p in parts if p)
    return env


def spawn_broker(profile: Profile) -> subprocess.Popen:
    proc = subprocess.Popen(
        [sys.executable, "-m", "flowd.cli", "--profile", profile.path,
         "broker", "run"],
        env=_repo_env())
    deadline = time.monotonic() + 15.0
    while time.monotonic() < deadline:
        if os.path.exists(profile.broker_socket):
            return proc
        if proc.poll() is not None:
            raise RuntimeError(f"broker exited early with {proc.returncode}")
        time.sleep(0.02)
    proc.kill()
    raise RuntimeError("broker did not come up in time")


def spawn_worker(profile: Profile, slots: int | None = None,
                 crash_after_checkpoints: int | None = None,
                 pythonpath: str | None = None) -> subprocess.Popen:
    cmd = [sys.executable, "-m", "flowd.cli", "--profile", profile.path,
           "worker", "run"]
    if slots is not None:
        cmd += ["--slots", str(slots)]
    env = _repo_env(pythonpath)
    if crash_after_checkpoints is not None:
        env["FLOWD_CRASH_AFTER_CHECKPOINTS"] = str(crash_after_checkpoints)
    return subprocess.Popen(cmd, env=env)


def freeze_process(proc: subprocess.Popen) -> None:
    os.kill(proc.pid, signal.SIGSTOP)


def unfreeze_process(proc: subprocess.Popen) -> None:
    os.kill(proc.pid, signal.SIGCONT)


def terminate_all(*procs: subprocess.Popen) -> None:
    for proc in procs:
        if proc.poll() is None:
            proc.terminate()
    for proc in procs:
        if proc.poll() is None:
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()


def wait_until(predicate: Callable[[], bool], timeout: float = 20.0,
               interval: float = 0.05, message: str = "condition") -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(interval)
    raise TimeoutError(f"timed out waiting for {message}")


def load_scenario(path: str) -> dict:
    """Scenario files: JSON with fault scripts and computer/scheduler settings."""
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
