"""Embedded durable message broker.

One broker process per profile: it owns the at-least-once task queue (file
backed, acknowledgements, heartbeat-based requeue), routes control RPCs to
the worker owning a process, fans out state-change broadcasts, and acts as
the authority for simulated time. Workers park timers here and declare
idleness; with ``time_mode=auto`` the clock advances to the next timer once
every worker is fully caught up, with ``manual`` it moves only on explicit
advance requests, and with ``wall`` timers map onto real time.

All broker state is mutated by a single dispatcher thread; socket reader
threads only parse frames and enqueue events.
"""

from __future__ import annotations

import fnmatch
import json
import os
import queue
import signal
import socket
import threading
import time as wall_time
import uuid
from dataclasses import dataclass, field

from . import wire
from .clock import SimClock
from .config import Profile
from .store import Store


@dataclass
class TaskRecord:
    task_id: str
    process_id: str
    seq: int
    delivery_count: int = 0


class TaskStore:
    """Durable FIFO of continue-process tasks; one JSON file per task."""

    def __init__(self, path: str, sync: bool = True):
        self.path = path
        self.sync = sync
        os.makedirs(path, exist_ok=True)
        self.tasks: dict[str, TaskRecord] = {}
        self._next_seq = 1
        self._load()

    def _load(self) -> None:
        for name in sorted(os.listdir(self.path)):
            if not name.endswith(".json"):
                continue
            with open(os.path.join(self.path, name), "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            record = TaskRecord(doc["task"], doc["process"], doc["seq"],
                                doc.get("deliveries", 0))
            self.tasks[record.task_id] = record
            self._next_seq = max(self._next_seq, record.seq + 1)

    def _file(self, task_id: str) -> str:
        return os.path.join(self.path, f"{task_id}.json")

    def _write(self, record: TaskRecord) -> None:
        doc = {"task": record.task_id, "process": record.process_id,
               "seq": record.seq, "deliveries": record.delivery_count}
        tmp = self._file(record.task_id) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.flush()
            if self.sync:
                os.fsync(fh.fileno())
        os.replace(tmp, self._file(record.task_id))

    def publish(self, process_id: str) -> TaskRecord:
        record = TaskRecord(uuid.uuid4().hex, process_id, self._next_seq)
        self._next_seq += 1
        self._write(record)  # durable before the publish reply goes out
        self.tasks[record.task_id] = record
        return record

    def bump_delivery(self, record: TaskRecord) -> None:
        record.delivery_count += 1
        self._write(record)

    def delete(self, task_id: str) -> None:
        self.tasks.pop(task_id, None)
        try:
            os.unlink(self._file(task_id))
        except FileNotFoundError:
            pass

    def ordered(self) -> list[TaskRecord]:
        return sorted(self.tasks.values(), key=lambda r: r.seq)


@dataclass
class Connection:
    conn_id: str
    sock: socket.socket
    role: str = "client"
    peer_id: str = ""
    alive: bool = True
    prefetch: int = 0
    consuming: bool = False
    leases: set = field(default_factory=set)
    delivery_seq: int = 0
    idle_seq: int = -1
    subscriptions: set = field(default_factory=set)
    ping_unanswered_since: float | None = None
    missed_pings: int = 0
    ping_timer = None
    send_lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def is_idle(self) -> bool:
        return self.role == "worker" and self.idle_seq == self.delivery_seq


class Broker:
    def __init__(self, profile: Profile):
        self.profile = profile
        self.socket_path = profile.broker_socket
        self.time_mode = profile.get("time_mode")
        self.heartbeat_period = profile.get("heartbeat_period")
        self.wall_grace = profile.get("heartbeat_wall_grace")
        self.clock = SimClock()
        self.tasks = TaskStore(profile.queue_dir, sync=profile.get("store_sync"))
        self.store = Store(profile.store_path, sync=profile.get("store_sync"))
        self.events: "queue.Queue[tuple]" = queue.Queue()
        self.conns: dict[str, Connection] = {}
        self.owners: dict[str, str] = {}        # process id -> conn id
        self.pending_rpc: dict[str, str] = {}   # correlation -> requester conn id
        self.running = False
        self._ping_grace_pending = False
        self._server: socket.socket | None = None

    # -- lifecycle -----------------------------------------------------------

    def start_server(self) -> None:
        if os.path.exists(self.socket_path):
            os.unlink(self.socket_path)
        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        server.bind(self.socket_path)
        server.listen(64)
        self._server = server
        threading.Thread(target=self._accept_loop, daemon=True,
                         name="flowd-broker-accept").start()

    def _accept_loop(self) -> None:
        while self.running:
            try:
                sock, _ = self._server.accept()
            except OSError:
                break
            conn = Connection(conn_id=uuid.uuid4().hex, sock=sock)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                             name=f"flowd-broker-read-{conn.conn_id[:6]}").start()

    def _read_loop(self, conn: Connection) -> None:
        try:
            while True:
                frame = wire.read_frame(conn.sock)
                if frame is None:
                    break
                self.events.put(("frame", conn, frame))
        except (OSError, wire.WireError):
            pass
        finally:
            self.events.put(("closed", conn, None))

    def run(self) -> None:
        """Dispatcher loop; blocks until shutdown."""
        self.running = True
        self.start_server()
        with open(self.profile.broker_pidfile, "w", encoding="utf-8") as fh:
            fh.write(str(os.getpid()))
        try:
            while self.running:
                timeout = self._dispatch_timeout()
                try:
                    event = self.events.get(timeout=timeout)
                except queue.Empty:
                    event = None
                if event is not None:
                    self._handle(event)
                while True:
                    try:
                        event = self.events.get_nowait()
                    except queue.Empty:
                        break
                    self._handle(event)
                if self.time_mode == "wall":
                    self.clock.advance_to(wall_time.monotonic())
                elif self.time_mode == "auto":
                    self._try_advance()
        finally:
            self._teardown()

    def stop(self) -> None:
        self.events.put(("stop", None, None))

    def _teardown(self) -> None:
        self.running = False
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        for conn in list(self.conns.values()):
            try:
                conn.sock.close()
            except OSError:
                pass
        try:
            os.unlink(self.socket_path)
        except FileNotFoundError:
            pass
        try:
            os.unlink(self.profile.broker_pidfile)
        except FileNotFoundError:
            pass

    def _dispatch_timeout(self) -> float:
        if self._ping_grace_pending:
            return 0.05
        if self.time_mode == "wall":
            deadline = self.clock.next_deadline()
            if deadline is not None:
                return max(0.0, min(deadline - wall_time.monotonic(), 0.2))
        return 0.5

    # -- sending ----------------------------------------------------------------

    def _send(self, conn: Connection, frame: dict, countable: bool = False) -> None:
        if not conn.alive:
            return
        frame["time"] = self.clock.now()
        if countable and conn.role == "worker":
            conn.delivery_seq += 1
            frame["seq"] = conn.delivery_seq
        try:
            with conn.send_lock:
                conn.sock.sendall(wire.pack(frame))
        except OSError:
            conn.alive = False

    def _reply(self, conn: Connection, request: dict, payload: dict | None = None,
               error: str | None = None) -> None:
        frame = dict(payload or {})
        frame["reply_to"] = request.get("id")
        frame["type"] = wire.ERROR if error else wire.OK
        if error:
            frame["message"] = error
        self._send(conn, frame)

    # -- event handling --------------------------------------------------------

    def _handle(self, event: tuple) -> None:
        kind, conn, frame = event
        if kind == "stop":
            self.running = False
            return
        if kind == "closed":
            self._drop_connection(conn)
            return
        if kind == "timer":
            return  # placeholder events used to poke the loop
        handler = getattr(self, f"_on_{frame.get('type')}", None)
        if handler is None:
            self._reply(conn, frame, error=f"unknown frame type {frame.get('type')!r}")
            return
        try:
            handler(conn, frame)
        except Exception as exc:  # never let one bad frame kill the broker
            self._reply(conn, frame, error=f"broker error: {exc}")

    def _drop_connection(self, conn: Connection) -> None:
        conn.alive = False
        self.conns.pop(conn.conn_id, None)
        if conn.ping_timer is not None:
            conn.ping_timer.cancel()
        # A lost worker releases its leases immediately; heartbeats only cover
        # workers that are frozen but still connected.
        self._requeue_leases(conn)
        for process_id in [p for p, c in self.owners.items() if c == conn.conn_id]:
            del self.owners[process_id]
        try:
            conn.sock.close()
        except OSError:
            pass
        self._deliver_tasks()

    def _requeue_leases(self, conn: Connection) -> None:
        leases, conn.leases = set(conn.leases), set()
        for task_id in leases:
            record = self.tasks.tasks.get(task_id)
            if record is not None:
                self.tasks.bump_delivery(record)

    # -- frame handlers -----------------------------------------------------------

    def _on_hello(self, conn: Connection, frame: dict) -> None:
        conn.role = frame.get("role", "client")
        conn.peer_id = frame.get("peer", conn.conn_id)
        if frame.get("slots"):
            conn.prefetch = int(frame["slots"])
        self.conns[conn.conn_id] = conn
        self._reply(conn, frame, {"time": self.clock.now()})

    def _on_goodbye(self, conn: Connection, frame: dict) -> None:
        self._drop_connection(conn)

    def _on_publish(self, conn: Connection, frame: dict) -> None:
        process_id = frame["process"]
        self.store.refresh()
        if not self.store.has_node(process_id):
            self._reply(conn, frame, error=f"unknown process {process_id}")
            return
        if not self.store.has_checkpoint(process_id):
            self._reply(conn, frame, error=f"process {process_id} has no checkpoint")
            return
        record = self.tasks.publish(process_id)
        self._reply(conn, frame, {"task": record.task_id})
        self._deliver_tasks()

    def _on_consume(self, conn: Connection, frame: dict) -> None:
        conn.prefetch = int(frame.get("prefetch", 1))
        conn.consuming = True
        self._reply(conn, frame)
        self._deliver_tasks()

    def _on_ack(self, conn: Connection, frame: dict) -> None:
        task_id = frame["task"]
        if task_id not in conn.leases:
            self._reply(conn, frame, error=f"task {task_id} is not leased by this "
                                           "worker (double ack or revoked lease)")
            return
        conn.leases.discard(task_id)
        self.tasks.delete(task_id)  # permanent: never redelivered
        self._reply(conn, frame)
        self._deliver_tasks()

    def _on_idle(self, conn: Connection, frame: dict) -> None:
        conn.idle_seq = int(frame.get("seq", -1))

    def _on_timer_req(self, conn: Connection, frame: dict) -> None:
        timer_id = frame["timer"]
        when = float(frame["when"])

        def fire():
            self._send(conn, {"type": wire.TIMER_FIRE, "timer": timer_id},
                       countable=True)

        self.clock.schedule_at(when, fire)
        if when <= self.clock.now():
            self.clock.advance_to(self.clock.now())  # fire immediately-due timers

    def _on_rpc(self, conn: Connection, frame: dict) -> None:
        target = frame["target"]
        owner_id = self.owners.get(target)
        owner = self.conns.get(owner_id) if owner_id else None
        if owner is None or not owner.alive:
            self._reply(conn, frame, error=f"no live owner for process {target}")
            return
        correlation = frame.get("id")
        self.pending_rpc[correlation] = conn.conn_id
        self._send(owner, {"type": wire.RPC, "target": target,
                           "verb": frame["verb"], "args": frame.get("args", {}),
                           "correlation": correlation}, countable=True)

    def _on_rpc_reply(self, conn: Connection, frame: dict) -> None:
        correlation = frame["correlation"]
        requester_id = self.pending_rpc.pop(correlation, None)
        requester = self.conns.get(requester_id) if requester_id else None
        if requester is not None:
            payload = dict(frame.get("payload", {}))
            payload["reply_to"] = correlation
            payload["type"] = wire.OK
            self._send(requester, payload)

    def _on_broadcast(self, conn: Connection, frame: dict) -> None:
        subject = frame["subject"]
        sender = frame.get("sender", "")
        for other in list(self.conns.values()):
            for subject_pat, sender_pat in other.subscriptions:
                if fnmatch.fnmatch(subject, subject_pat) and \
                        fnmatch.fnmatch(sender, sender_pat):
                    self._send(other, {"type": wire.BROADCAST, "subject": subject,
                                       "sender": sender,
                                       "body": frame.get("body", {})},
                               countable=True)
                    break

    def _on_subscribe(self, conn: Connection, frame: dict) -> None:
        conn.subscriptions.add((frame.get("subject", "*"), frame.get("sender", "*")))

    def _on_unsubscribe(self, conn: Connection, frame: dict) -> None:
        conn.subscriptions.discard((frame.get("subject", "*"), frame.get("sender", "*")))

    def _on_owner_add(self, conn: Connection, frame: dict) -> None:
        self.owners[frame["process"]] = conn.conn_id

    def _on_owner_rm(self, conn: Connection, frame: dict) -> None:
        if self.owners.get(frame["process"]) == conn.conn_id:
            del self.owners[frame["process"]]

    def _on_pong(self, conn: Connection, frame: dict) -> None:
        conn.missed_pings = 0
        conn.ping_unanswered_since = None

    def _on_advance(self, conn: Connection, frame: dict) -> None:
        if "by" in frame:
            target = self.clock.now() + float(frame["by"])
        else:
            target = float(frame["to"])
        self.clock.advance_to(target)
        self._reply(conn, frame, {"time": self.clock.now()})

    def _on_get_time(self, conn: Connection, frame: dict) -> None:
        self._reply(conn, frame, {"time": self.clock.now()})

    def _on_stats(self, conn: Connection, frame: dict) -> None:
        stats = {
            "time": self.clock.now(),
            "tasks": [
                {"task": r.task_id, "process": r.process_id,
                 "deliveries": r.delivery_count,
                 "leased_by": next((c.peer_id for c in self.conns.values()
                                    if r.task_id in c.leases), None)}
                for r in self.tasks.ordered()
            ],
            "workers": [
                {"peer": c.peer_id, "leases": len(c.leases),
                 "prefetch": c.prefetch, "idle": c.is_idle}
                for c in self.conns.values() if c.role == "worker"
            ],
            "owners": dict(self.owners),
        }
        self._reply(conn, frame, {"stats": stats})

    def _on_daemon_ctl(self, conn: Connection, frame: dict) -> None:
        supervisor = next((c for c in self.conns.values()
                           if c.role == "daemon" and c.alive), None)
        if supervisor is None:
            self._reply(conn, frame, error="no daemon supervisor is connected")
            return
        correlation = frame.get("id")
        self.pending_rpc[correlation] = conn.conn_id
        self._send(supervisor, {"type": wire.DAEMON_CTL,
                                "command": frame.get("command"),
                                "args": frame.get("args", {}),
                                "correlation": correlation})

    def _on_shutdown(self, conn: Connection, frame: dict) -> None:
        self._reply(conn, frame)
        self.running = False

    # -- task delivery -------------------------------------------------------------

    def _worker_conns(self) -> list[Connection]:
        return [c for c in self.conns.values() if c.role == "worker" and c.alive]

    def _deliver_tasks(self) -> None:
        leased = set()
        for conn in self._worker_conns():
            leased |= conn.leases
        for record in self.tasks.ordered():
            if record.task_id in leased:
                continue
            target = next((c for c in self._worker_conns()
                           if c.consuming and len(c.leases) < c.prefetch), None)
            if target is None:
                break
            target.leases.add(record.task_id)
            leased.add(record.task_id)
            record.delivery_count += 1
            self._send(target, {"type": wire.TASK, "task": record.task_id,
                                "process": record.process_id,
                                "delivery": record.delivery_count}, countable=True)
            self._ensure_ping_timer(target)

    # -- heartbeats -------------------------------------------------------------------

    def _ensure_ping_timer(self, conn: Connection) -> None:
        if conn.ping_timer is None and conn.leases:
            conn.ping_timer = self.clock.schedule_after(
                self.heartbeat_period, lambda: self._ping_tick(conn))

    def _ping_tick(self, conn: Connection) -> None:
        conn.ping_timer = None
        if not conn.alive or conn.conn_id not in self.conns:
            return
        if not conn.leases:
            conn.ping_unanswered_since = None
            conn.missed_pings = 0
            return  # pings run only while the worker holds leases
        if conn.ping_unanswered_since is None:
            conn.ping_unanswered_since = wall_time.monotonic()
        else:
            if wall_time.monotonic() - conn.ping_unanswered_since >= self.wall_grace:
                conn.missed_pings += 1
                if conn.missed_pings >= 2:
                    self._revoke(conn)
                    return
        self._send(conn, {"type": wire.PING, "ping": wire.new_id()})
        self._ensure_ping_timer(conn)

    def _revoke(self, conn: Connection) -> None:
        """Two consecutive missed heartbeats: presume the worker dead."""
        self._drop_connection(conn)

    # -- simulated time ---------------------------------------------------------------

    def _try_advance(self) -> None:
        """Advance simulated time when every worker is quiescent."""
        while True:
            if not self.events.empty():
                return
            workers = self._worker_conns()
            if not workers:
                return
            if any(not c.is_idle for c in workers):
                return
            young_ping = any(
                c.ping_unanswered_since is not None
                and wall_time.monotonic() - c.ping_unanswered_since < self.wall_grace
                for c in workers)
            if young_ping:
                self._ping_grace_pending = True
                return
            self._ping_grace_pending = False
            if self.clock.next_deadline() is None:
                return
            self.clock.advance_next()


def run_broker(profile: Profile) -> None:
    broker = Broker(profile)

    def _stop(signum, _frame):
        broker.stop()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    broker.run()
