"""Broker client used by workers, the CLI and tests.

A reader thread owns the receive side of the socket: it answers heartbeat
pings immediately (so liveness holds even while the runner executes a long
blocking step), wakes request/reply waiters, and pushes everything else into
a mailbox that the runner drains between process steps.
"""

from __future__ import annotations

import queue
import socket
import threading
from typing import Any

from . import wire


class BrokerError(Exception):
    pass


class BrokerTimeout(BrokerError):
    pass


class Communicator:
    def __init__(self, sock: socket.socket, role: str, peer_id: str):
        self._sock = sock
        self.role = role
        self.peer_id = peer_id
        self.mailbox: "queue.Queue[dict]" = queue.Queue()
        self.broker_time: float = 0.0
        self.connected = True
        self._send_lock = threading.Lock()
        self._waiters: dict[str, queue.Queue] = {}
        self._waiters_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"flowd-comm-{peer_id[:6]}")
        self._reader.start()

    # -- connection ---------------------------------------------------------

    @classmethod
    def connect(cls, socket_path: str, role: str, peer_id: str,
                slots: int | None = None, timeout: float = 5.0) -> "Communicator":
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(timeout)
        try:
            sock.connect(socket_path)
        except OSError as exc:
            sock.close()
            raise BrokerError(f"cannot reach broker at {socket_path}: {exc}") from exc
        sock.settimeout(None)
        comm = cls(sock, role, peer_id)
        hello: dict[str, Any] = {"role": role, "peer": peer_id}
        if slots is not None:
            hello["slots"] = slots
        comm.request(wire.HELLO, hello)
        return comm

    def close(self, goodbye: bool = True) -> None:
        if goodbye and self.connected:
            try:
                self._send({"type": wire.GOODBYE})
            except Exception:
                pass
        self.connected = False
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    # -- frame plumbing ---------------------------------------------------------

    def _send(self, frame: dict) -> None:
        data = wire.pack(frame)
        with self._send_lock:
            self._sock.sendall(data)

    def _read_loop(self) -> None:
        try:
            while True:
                frame = wire.read_frame(self._sock)
                if frame is None:
                    break
                self._dispatch(frame)
        except (OSError, wire.WireError):
            pass
        finally:
            self.connected = False
            self.mailbox.put({"type": "_disconnected"})
            with self._waiters_lock:
                waiters = list(self._waiters.values())
            for waiter in waiters:
                waiter.put({"type": wire.ERROR, "message": "broker connection lost"})

    def _dispatch(self, frame: dict) -> None:
        if "time" in frame:
            self.broker_time = max(self.broker_time, frame["time"])
        ftype = frame.get("type")
        if ftype == wire.PING:
            # Answered here, on the communicator thread, never on the runner.
            try:
                self._send({"type": wire.PONG, "ping": frame["ping"]})
            except OSError:
                pass
            return
        reply_to = frame.get("reply_to")
        if reply_to is not None:
            with self._waiters_lock:
                waiter = self._waiters.pop(reply_to, None)
            if waiter is not None:
                waiter.put(frame)
                return
        self.mailbox.put(frame)

    def request(self, ftype: str, payload: dict | None = None,
                timeout: float = 10.0) -> dict:
        """Send a frame and wait (wall clock) for the correlated reply."""
        frame = dict(payload or {})
        frame["type"] = ftype
        frame["id"] = wire.new_id()
        waiter: "queue.Queue[dict]" = queue.Queue()
        with self._waiters_lock:
            self._waiters[frame["id"]] = waiter
        self._send(frame)
        try:
            reply = waiter.get(timeout=timeout)
        except queue.Empty:
            with self._waiters_lock:
                self._waiters.pop(frame["id"], None)
            raise BrokerTimeout(f"no reply to {ftype} within {timeout}s") from None
        if reply.get("type") == wire.ERROR:
            raise BrokerError(reply.get("message", "broker error"))
        return reply

    def send(self, ftype: str, payload: dict | None = None) -> None:
        frame = dict(payload or {})
        frame["type"] = ftype
        self._send(frame)

    # -- typed operations -----------------------------------------------------

    def publish_task(self, process_id: str) -> str:
        reply = self.request(wire.PUBLISH, {"process": process_id})
        return reply["task"]

    def consume(self, prefetch: int) -> None:
        self.request(wire.CONSUME, {"prefetch": prefetch})

    def ack(self, task_id: str) -> None:
        self.request(wire.ACK, {"task": task_id})

    def idle(self, seq: int) -> None:
        self.send(wire.IDLE, {"seq": seq})

    def request_timer(self, when: float) -> str:
        timer_id = wire.new_id()
        self.send(wire.TIMER_REQ, {"timer": timer_id, "when": when})
        return timer_id

    def rpc(self, target: str, verb: str, args: dict | None = None,
            timeout: float = 10.0) -> dict:
        return self.request(wire.RPC, {"target": target, "verb": verb,
                                       "args": args or {}}, timeout=timeout)

    def rpc_reply(self, correlation: str, payload: dict) -> None:
        self.send(wire.RPC_REPLY, {"correlation": correlation, "payload": payload})

    def broadcast(self, subject: str, sender: str, body: dict | None = None) -> None:
        self.send(wire.BROADCAST, {"subject": subject, "sender": sender,
                                   "body": body or {}})

    def subscribe(self, subject: str = "*", sender: str = "*") -> None:
        self.send(wire.SUBSCRIBE, {"subject": subject, "sender": sender})

    def unsubscribe(self, subject: str = "*", sender: str = "*") -> None:
        self.send(wire.UNSUBSCRIBE, {"subject": subject, "sender": sender})

    def owner_add(self, process_id: str) -> None:
        self.send(wire.OWNER_ADD, {"process": process_id})

    def owner_rm(self, process_id: str) -> None:
        self.send(wire.OWNER_RM, {"process": process_id})

    def advance_by(self, amount: float, timeout: float = 30.0) -> float:
        reply = self.request(wire.ADVANCE, {"by": amount}, timeout=timeout)
        return reply["time"]

    def advance_to(self, when: float, timeout: float = 30.0) -> float:
        reply = self.request(wire.ADVANCE, {"to": when}, timeout=timeout)
        return reply["time"]

    def get_time(self) -> float:
        return self.request(wire.GET_TIME)["time"]

    def stats(self) -> dict:
        return self.request(wire.STATS)["stats"]

    def daemon_ctl(self, command: str, args: dict | None = None,
                   timeout: float = 30.0) -> dict:
        return self.request(wire.DAEMON_CTL, {"command": command,
                                              "args": args or {}}, timeout=timeout)

    def shutdown_broker(self) -> None:
        try:
            self.request(wire.SHUTDOWN, timeout=5.0)
        except BrokerError:
            pass
