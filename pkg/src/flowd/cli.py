"""flowd command line interface.

Exit codes: 0 success, 1 unknown reference or failed operation, 2 broker/daemon
unreachable for control verbs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import uuid

from .client import BrokerError, Communicator
from .config import PROFILE_ENV, create_profile, load_profile
from .daemon import start_daemon_detached, supervisor_main, wait_for_socket, worker_main
from .registry import resolve_process
from .runner import Runner, local_run, submit
from .store import NotFoundError, Store, StoreError
from .values import from_stored, to_value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowd",
                                     description="workflow engine command line")
    parser.add_argument("--profile", default=None,
                        help=f"profile directory (default: ${PROFILE_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a profile directory")
    p.add_argument("path")
    p.add_argument("--time-mode", default="auto", choices=["auto", "manual", "wall"])

    p = sub.add_parser("submit", help="submit a process to the daemon")
    p.add_argument("definition", help="qualified process class name")
    p.add_argument("inputs_file", nargs="?", help="JSON file of port path -> value")

    p = sub.add_parser("run", help="run a process locally, blocking")
    p.add_argument("definition")
    p.add_argument("inputs_file", nargs="?")

    p = sub.add_parser("status", help="show state and exit status")
    p.add_argument("ref")

    p = sub.add_parser("list", help="list process nodes")
    p.add_argument("--state", default=None)

    p = sub.add_parser("report", help="print REPORT-level log records")
    p.add_argument("ref")

    for verb in ("pause", "play", "kill"):
        p = sub.add_parser(verb, help=f"{verb} a live process")
        p.add_argument("ref")
        p.add_argument("--all-children", action="store_true",
                       help="apply to every process called by this one as well")

    p = sub.add_parser("graph", help="export provenance graph")
    p.add_argument("ref", nargs="?")
    p.add_argument("--format", default="dot", choices=["dot"])

    p = sub.add_parser("checkpoint", help="checkpoint inspection")
    p_sub = p.add_subparsers(dest="checkpoint_command", required=True)
    ps = p_sub.add_parser("show", help="print the stored checkpoint (read-only)")
    ps.add_argument("ref")

    p = sub.add_parser("show", help="introspect a process definition")
    p.add_argument("definition")
    p.add_argument("--spec", action="store_true", help="print the port specification")

    p = sub.add_parser("daemon", help="daemon control")
    p_sub = p.add_subparsers(dest="daemon_command", required=True)
    ps = p_sub.add_parser("start")
    ps.add_argument("--workers", type=int, default=None)
    p_sub.add_parser("stop")
    p_sub.add_parser("status")
    ps = p_sub.add_parser("scale")
    ps.add_argument("workers", type=int)
    ps = p_sub.add_parser("supervise", help=argparse.SUPPRESS)
    ps.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("worker", help="worker control")
    p_sub = p.add_subparsers(dest="worker_command", required=True)
    ps = p_sub.add_parser("run", help=argparse.SUPPRESS)
    ps.add_argument("--slots", type=int, default=None)

    p = sub.add_parser("broker", help="broker control")
    p_sub = p.add_subparsers(dest="broker_command", required=True)
    p_sub.add_parser("run", help=argparse.SUPPRESS)

    return parser


def _load_inputs(path: str | None) -> dict:
    """Inputs file: JSON mapping period-separated port paths to values.

    Entries are either {"type": <tag>, "value": <payload>} or bare JSON
    scalars/containers that map onto a built-in value type.
    """
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        flat = json.load(fh)
    nested: dict = {}
    for dotted, raw in flat.items():
        if isinstance(raw, dict) and set(raw) == {"type", "value"}:
            value = from_stored(raw["type"], raw["value"])
        else:
            value = to_value(raw)
        keys = dotted.split(".")
        scope = nested
        for key in keys[:-1]:
            scope = scope.setdefault(key, {})
        scope[keys[-1]] = value
    return nested


def _store(args) -> Store:
    profile = load_profile(args.profile)
    return Store(profile.store_path, sync=profile.get("store_sync"))


def _resolve_or_die(store: Store, ref: str) -> str:
    try:
        return store.resolve(ref)
    except (NotFoundError, StoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(1)


def _connect_or_die(profile) -> Communicator:
    try:
        return Communicator.connect(profile.broker_socket, "client",
                                    f"cli-{uuid.uuid4().hex[:6]}")
    except BrokerError as exc:
        print(f"error: broker unreachable: {exc}", file=sys.stderr)
        raise SystemExit(2)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handler = globals()[f"_cmd_{args.command}"]
    try:
        return handler(args) or 0
    except SystemExit as exc:
        return int(exc.code or 0)


def _cmd_init(args) -> int:
    profile = create_profile(args.path, time_mode=args.time_mode)
    print(f"profile created at {profile.path}")
    return 0


def _cmd_submit(args) -> int:
    profile = load_profile(args.profile)
    cls = resolve_process(args.definition)
    inputs = _load_inputs(args.inputs_file)
    try:
        node_id = submit(cls, inputs, profile)
    except BrokerError as exc:
        print(f"error: broker unreachable: {exc}", file=sys.stderr)
        return 2
    store = Store(profile.store_path, sync=False)
    print(f"submitted {store.node(node_id).seq} ({node_id})")
    return 0


def _cmd_run(args) -> int:
    profile = load_profile(args.profile)
    cls = resolve_process(args.definition)
    inputs = _load_inputs(args.inputs_file)
    report = local_run(cls, profile=profile, **inputs)
    print(f"state: {report.state.value}")
    print(f"exit_status: {report.exit_status}")
    for label, value in sorted(report.outputs.items()):
        print(f"output {label}: {value!r}")
    return 0 if report.is_finished_ok else 1


def _cmd_status(args) -> int:
    store = _store(args)
    node_id = _resolve_or_die(store, args.ref)
    record = store.node(node_id)
    print(f"id: {record.seq} ({record.id})")
    print(f"kind: {record.kind}")
    if record.is_process:
        attrs = record.attributes
        print(f"state: {attrs.get('process_state')}")
        if attrs.get("paused"):
            print("paused: true")
        if "exit_status" in attrs:
            print(f"exit_status: {attrs['exit_status']}")
        if "exit_message" in attrs:
            print(f"exit_message: {attrs['exit_message']}")
    return 0


def _cmd_list(args) -> int:
    store = _store(args)
    for record in store.nodes():
        if not record.is_process:
            continue
        state = record.attributes.get("process_state", "?")
        if args.state and state != args.state:
            continue
        label = record.attributes.get("process_class", "")
        print(f"{record.seq:>6}  {record.kind:<14} {state:<9} {label}")
    return 0


def _cmd_report(args) -> int:
    store = _store(args)
    node_id = _resolve_or_die(store, args.ref)
    for entry in store.read_logs(node_id, level="REPORT"):
        stamp = time.strftime("%H:%M:%S", time.localtime(entry.timestamp))
        print(f"{stamp} REPORT {entry.message}")
    return 0


def _descendants(store: Store, node_id: str) -> list[str]:
    out, frontier = [], [node_id]
    while frontier:
        current = frontier.pop()
        for _, child in store.traverse(current, "outgoing", ("CALL",)):
            out.append(child)
            frontier.append(child)
    return out


def _control(args, verb: str) -> int:
    profile = load_profile(args.profile)
    store = Store(profile.store_path, sync=False)
    node_id = _resolve_or_die(store, args.ref)
    targets = [node_id] + (_descendants(store, node_id) if args.all_children else [])
    comm = _connect_or_die(profile)
    status = 0
    try:
        for target in targets:
            outcome = _control_one(profile, store, comm, target, verb)
            record = store.node(target)
            print(f"{record.seq}: {outcome}")
            if outcome.startswith("error"):
                status = 1
    finally:
        comm.close()
    return status


def _control_one(profile, store, comm, target, verb) -> str:
    try:
        reply = comm.rpc(target, verb, {}, timeout=profile.get("rpc_timeout"))
        if reply.get("ok"):
            return {"kill": "killed", "pause": "paused", "play": "playing"}[verb]
        return f"error: {reply.get('error', 'rejected')}"
    except BrokerError as exc:
        if verb == "kill":
            # Not owned by any worker: a queued process can still be killed
            # directly through the store.
            runner = Runner(profile)
            runner._kill_in_store(target, "killed by user")
            store.refresh()
            if store.node(target).attributes.get("process_state") == "killed":
                return "killed"
        return f"error: {exc}"


def _cmd_pause(args) -> int:
    return _control(args, "pause")


def _cmd_play(args) -> int:
    return _control(args, "play")


def _cmd_kill(args) -> int:
    return _control(args, "kill")


def _cmd_graph(args) -> int:
    store = _store(args)
    root = _resolve_or_die(store, args.ref) if args.ref else None
    sys.stdout.write(store.to_dot(root))
    return 0


def _cmd_checkpoint(args) -> int:
    store = _store(args)
    node_id = _resolve_or_die(store, args.ref)
    try:
        payload = store.load_checkpoint(node_id)
    except NotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _cmd_show(args) -> int:
    cls = resolve_process(args.definition)
    if args.spec:
        print(cls.spec().to_text())
    else:
        print(f"{args.definition}: kind={getattr(cls, 'kind', '?')}")
    return 0


def _cmd_daemon(args) -> int:
    profile = load_profile(args.profile)
    command = args.daemon_command
    if command == "supervise":
        return supervisor_main(profile, workers=args.workers)
    if command == "start":
        if os.path.exists(profile.daemon_pidfile):
            print("daemon already running (pid file exists)")
            return 1
        pid = start_daemon_detached(profile, args.workers)
        if not wait_for_socket(profile.broker_socket, timeout=15.0):
            print("error: broker did not come up", file=sys.stderr)
            return 2
        print(f"daemon started (supervisor pid {pid})")
        return 0
    comm = _connect_or_die(profile)
    try:
        try:
            if command == "stop":
                reply = comm.daemon_ctl("stop")
                print("daemon stopping" if reply.get("ok") else "stop rejected")
            elif command == "status":
                reply = comm.daemon_ctl("status")
                for worker in reply.get("workers", []):
                    state = "alive" if worker["alive"] else "dead"
                    print(f"worker pid {worker['pid']}: {state}")
                print(f"desired workers: {reply.get('desired')}")
            elif command == "scale":
                reply = comm.daemon_ctl("scale", {"workers": args.workers})
                if reply.get("ok"):
                    print(f"scaled to {reply.get('workers')} workers")
                else:
                    print(f"error: {reply.get('error')}", file=sys.stderr)
                    return 1
        except BrokerError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    finally:
        comm.close()
    return 0


def _cmd_worker(args) -> int:
    profile = load_profile(args.profile)
    return worker_main(profile, slots=args.slots)


def _cmd_broker(args) -> int:
    from .broker import run_broker

    profile = load_profile(args.profile)
    run_broker(profile)
    return 0


if __name__ == "__main__":
    sys.exit(main())
