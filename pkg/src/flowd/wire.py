"""Local socket wire format.

Frames are length-prefixed (4-byte big-endian) UTF-8 JSON objects:

    {"v": 1, "type": <str>, "id": <str?>, "reply_to": <str?>,
     "seq": <int?>, "time": <float?>, ...payload}

``seq`` counts broker->peer deliveries that the peer's runner must process
before it may declare itself idle; ``time`` carries the broker's simulated
clock on every frame it sends. Everything else is frame-type specific.
"""

from __future__ import annotations

import json
import socket
import struct
import uuid

WIRE_VERSION = 1
MAX_FRAME = 32 * 1024 * 1024

# peer -> broker
HELLO = "hello"
PUBLISH = "publish"
CONSUME = "consume"
ACK = "ack"
IDLE = "idle"
TIMER_REQ = "timer_req"
RPC = "rpc"
RPC_REPLY = "rpc_reply"
BROADCAST = "broadcast"
SUBSCRIBE = "subscribe"
UNSUBSCRIBE = "unsubscribe"
OWNER_ADD = "owner_add"
OWNER_RM = "owner_rm"
PONG = "pong"
ADVANCE = "advance"
GET_TIME = "get_time"
STATS = "stats"
DAEMON_CTL = "daemon_ctl"
GOODBYE = "goodbye"
SHUTDOWN = "shutdown"

# broker -> peer
OK = "ok"
ERROR = "error"
TASK = "task"
TIMER_FIRE = "timer_fire"
PING = "ping"


class WireError(Exception):
    pass


def new_id() -> str:
    return uuid.uuid4().hex


def pack(frame: dict) -> bytes:
    frame.setdefault("v", WIRE_VERSION)
    data = json.dumps(frame, separators=(",", ":")).encode("utf-8")
    if len(data) > MAX_FRAME:
        raise WireError(f"frame of {len(data)} bytes exceeds the maximum")
    return struct.pack(">I", len(data)) + data


def read_frame(sock: socket.socket) -> dict | None:
    """Read one frame; None on orderly EOF."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise WireError(f"announced frame of {length} bytes exceeds the maximum")
    data = _read_exact(sock, length)
    if data is None:
        return None
    frame = json.loads(data.decode("utf-8"))
    if frame.get("v") != WIRE_VERSION:
        raise WireError(f"unsupported wire version {frame.get('v')!r}")
    return frame


def _read_exact(sock: socket.socket, count: int) -> bytes | None:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)
