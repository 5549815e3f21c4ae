"""Simulated remote computing resource.

Stands in for a real cluster: a filesystem namespace under the profile
directory, a scheduler with a job table, and a transport whose operations can
fail according to a scripted or probabilistic fault model. All state that has
to be visible across worker processes (job table, operation log) lives in a
JSON state file guarded by a file lock; timing comes from the injected clock,
so runs are deterministic under a fixed seed and script.
"""

from __future__ import annotations

import json
import os
import random
import shlex
from typing import Callable

from filelock import FileLock


class TransportError(Exception):
    """Infrastructure fault: connection, filesystem or scheduler trouble.

    Anything raised as (a subclass of) this from the transport layer is
    retried/paused by the engine rather than excepting the process.
    """


class SchedulerError(TransportError):
    pass


class FaultScript:
    """Replayable fault model.

    Rules select a transport operation and a set of 1-based occurrence indices
    that must fail, or a count of leading failures, or a probability applied
    through a seeded generator. Counters can be reset (used when a test clears
    an external fault so a paused process can be played).
    """

    def __init__(self, rules: list[dict] | None = None, seed: int = 0,
                 fail_probability: float = 0.0):
        self.rules = rules or []
        self.seed = seed
        self.fail_probability = fail_probability
        self._rng = random.Random(seed)
        self._counts: dict[str, int] = {}
        self._cleared = False

    @classmethod
    def from_config(cls, config: dict) -> "FaultScript":
        return cls(rules=config.get("faults", []),
                   seed=config.get("fault_seed", 0),
                   fail_probability=config.get("fail_probability", 0.0))

    def clear(self) -> None:
        """Stop injecting faults (the external problem got fixed)."""
        self._cleared = True

    def should_fail(self, op: str) -> str | None:
        """Returns a fault message when this occurrence of `op` must fail."""
        count = self._counts.get(op, 0) + 1
        self._counts[op] = count
        if self._cleared:
            return None
        for rule in self.rules:
            target = rule.get("op")
            if target not in (op, "*"):
                continue
            if rule.get("always"):
                return rule.get("message", f"scripted {op} failure")
            if count <= rule.get("first", 0):
                return rule.get("message", f"scripted {op} failure #{count}")
            if count in rule.get("occurrences", ()):
                return rule.get("message", f"scripted {op} failure #{count}")
        if self.fail_probability and self._rng.random() < self.fail_probability:
            return f"random {op} failure"
        return None


# Behaviors of simulated codes: given the input files of the job's working
# directory, produce the output files the "execution" leaves behind.
_CODE_BEHAVIORS: dict[str, Callable[[list[str], dict[str, str]], dict[str, str]]] = {}


def register_code(name: str):
    def _apply(fn):
        _CODE_BEHAVIORS[name] = fn
        return fn
    return _apply


@register_code("echo")
def _echo_code(argv: list[str], files: dict[str, str]) -> dict[str, str]:
    """Copy the input file to the output file, uppercasing nothing."""
    infile, outfile = argv[1], argv[2]
    return {outfile: files.get(infile, "")}


@register_code("fail")
def _fail_code(argv: list[str], files: dict[str, str]) -> dict[str, str]:
    """Produce output marking a scientific (non-infrastructure) failure."""
    outfile = argv[1] if len(argv) > 1 else "job.out"
    return {outfile: "ERROR: bad output\n"}


class SimulatedComputer:
    """One remote resource: filesystem root, scheduler table, fault model."""

    def __init__(self, name: str, root: str, clock, safe_interval: float = 30.0,
                 poll_interval: float = 5.0, faults: FaultScript | None = None):
        self.name = name
        self.root = os.path.abspath(root)
        self.clock = clock
        self.safe_interval = safe_interval
        self.poll_interval = poll_interval
        self.faults = faults or FaultScript()
        os.makedirs(self.root, exist_ok=True)
        self._state_file = os.path.join(self.root, "state.json")
        self._lock = FileLock(os.path.join(self.root, "state.lock"))
        self.opens = 0  # per-process opening counter (rationing assertions)

    @classmethod
    def from_config(cls, profile, config: dict, clock) -> "SimulatedComputer":
        root = os.path.join(profile.remote_root, config["name"])
        return cls(config["name"], root, clock,
                   safe_interval=config.get("safe_interval", 30.0),
                   poll_interval=config.get("poll_interval", 5.0),
                   faults=FaultScript.from_config(config))

    # -- shared state ------------------------------------------------------

    def _load_state(self) -> dict:
        if os.path.exists(self._state_file):
            with open(self._state_file, "r", encoding="utf-8") as fh:
                return json.load(fh)
        return {"jobs": {}, "next_job": 1, "opens": [], "poll_log": []}

    def _save_state(self, state: dict) -> None:
        tmp = self._state_file + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(state, fh, sort_keys=True)
        os.replace(tmp, self._state_file)

    def stats(self) -> dict:
        with self._lock:
            state = self._load_state()
        return {"opens": list(state["opens"]), "poll_log": list(state["poll_log"]),
                "jobs": dict(state["jobs"])}

    # -- transport factory ----------------------------------------------------

    def open_transport(self) -> "SimulatedTransport":
        fault = self.faults.should_fail("open")
        if fault:
            raise TransportError(fault)
        self.opens += 1
        with self._lock:
            state = self._load_state()
            state["opens"].append(self.clock.now())
            self._save_state(state)
        return SimulatedTransport(self)


class SimulatedTransport:
    """An open connection to the simulated computer."""

    def __init__(self, computer: SimulatedComputer):
        self.computer = computer
        self._open = True

    def close(self) -> None:
        self._open = False

    def _check(self, op: str) -> None:
        if not self._open:
            raise TransportError(f"{op} on a closed transport")
        fault = self.computer.faults.should_fail(op)
        if fault:
            raise TransportError(fault)

    # -- filesystem operations ----------------------------------------------

    def _abs(self, path: str) -> str:
        full = os.path.normpath(os.path.join(self.computer.root, path))
        if not full.startswith(self.computer.root):
            raise TransportError(f"path {path!r} escapes the remote namespace")
        return full

    def makedirs(self, path: str) -> None:
        self._check("mkdir")
        os.makedirs(self._abs(path), exist_ok=True)

    def put_file(self, path: str, content: str) -> None:
        self._check("put")
        full = self._abs(path)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        with open(full, "w", encoding="utf-8") as fh:
            fh.write(content)

    def get_file(self, path: str) -> str:
        self._check("get")
        full = self._abs(path)
        try:
            with open(full, "r", encoding="utf-8") as fh:
                return fh.read()
        except FileNotFoundError:
            raise TransportError(f"remote file {path!r} does not exist") from None

    def listdir(self, path: str) -> list[str]:
        self._check("list")
        return sorted(os.listdir(self._abs(path)))

    # -- scheduler operations ---------------------------------------------------

    def submit_job(self, workdir: str, script_name: str = "job.sh") -> str:
        """Submit the rendered job script; returns the scheduler job id."""
        self._check("submit")
        script = self.get_file(os.path.join(workdir, script_name))
        command, walltime = _parse_job_script(script)
        with self.computer._lock:
            state = self.computer._load_state()
            job_id = str(state["next_job"])
            state["next_job"] += 1
            state["jobs"][job_id] = {
                "workdir": workdir,
                "command": command,
                "walltime": walltime,
                "submitted_at": self.computer.clock.now(),
                "state": "running",
                "finalized": False,
            }
            self.computer._save_state(state)
        return job_id

    def poll_jobs(self, job_ids: list[str]) -> dict[str, str]:
        """One scheduler query covering all requested ids."""
        self._check("poll")
        now = self.computer.clock.now()
        with self.computer._lock:
            state = self.computer._load_state()
            state["poll_log"].append({"time": now, "ids": sorted(job_ids)})
            result = {}
            for job_id in job_ids:
                job = state["jobs"].get(job_id)
                if job is None:
                    result[job_id] = "unknown"
                    continue
                if job["state"] == "running" and now >= job["submitted_at"] + job["walltime"]:
                    job["state"] = "done"
                if job["state"] == "done" and not job["finalized"]:
                    self._finalize_job(job)
                    job["finalized"] = True
                result[job_id] = job["state"]
            self.computer._save_state(state)
        return result

    def cancel_job(self, job_id: str) -> None:
        self._check("cancel")
        with self.computer._lock:
            state = self.computer._load_state()
            job = state["jobs"].get(job_id)
            if job is not None and job["state"] != "done":
                job["state"] = "cancelled"
            self.computer._save_state(state)

    def _finalize_job(self, job: dict) -> None:
        """Materialize the job's output files per its code behavior."""
        argv = job["command"]
        behavior = _CODE_BEHAVIORS.get(argv[0])
        if behavior is None:
            return
        workdir = self._abs(job["workdir"])
        files = {}
        for name in os.listdir(workdir):
            with open(os.path.join(workdir, name), "r", encoding="utf-8") as fh:
                files[name] = fh.read()
        outputs = behavior(argv, files)
        for name, content in outputs.items():
            with open(os.path.join(workdir, name), "w", encoding="utf-8") as fh:
                fh.write(content)


def _parse_job_script(script: str) -> tuple[list, float]:
    """Extract the command line and the walltime resource comment."""
    command: list[str] = []
    walltime = 0.0
    for line in script.splitlines():
        line = line.strip()
        if not line or line.startswith("#!"):
            continue
        if line.startswith("#"):
            if "walltime" in line:
                walltime = float(line.split("=", 1)[1].strip())
            continue
        command = shlex.split(line)
    if not command:
        raise SchedulerError("job script has no command line")
    return command, walltime


def render_job_script(command: list[str], walltime: float) -> str:
    """The plain-text job script uploaded with every calculation job."""
    return "\n".join([
        "#!/bin/sh",
        f"# resource: walltime = {walltime}",
        shlex.join(command),
        "",
    ])
