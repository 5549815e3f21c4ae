"""Worker processes and the daemon supervisor.

A worker is one operating-system process running a runner connected to the
broker. The supervisor starts the broker (if needed) plus a pool of workers,
restarts crashed workers, and handles scale/status/stop control messages that
clients send through the broker.
"""

from __future__ import annotations

import os
import signal
import subprocess
import sys
import threading
import time
import uuid

from .client import BrokerError, Communicator
from .config import Profile, load_profile
from .runner import Runner
from . import wire


def wait_for_socket(path: str, timeout: float = 10.0) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if os.path.exists(path):
            return True
        time.sleep(0.02)
    return False


# -- worker ------------------------------------------------------------------


def worker_main(profile: Profile, slots: int | None = None,
                worker_id: str | None = None) -> int:
    """Entry point of one worker process; returns the exit status."""
    worker_id = worker_id or f"worker-{os.getpid()}"
    slots = slots if slots is not None else profile.get("slots")
    if not wait_for_socket(profile.broker_socket, timeout=15.0):
        print(f"{worker_id}: broker socket never appeared", file=sys.stderr)
        return 2
    try:
        comm = Communicator.connect(profile.broker_socket, "worker", worker_id,
                                    slots=slots)
    except BrokerError as exc:
        print(f"{worker_id}: {exc}", file=sys.stderr)
        return 2
    runner = Runner(profile, communicator=comm, slots=slots, worker_id=worker_id)
    _install_crash_injection(runner)

    def _term(signum, frame):
        runner.request_stop()

    signal.signal(signal.SIGTERM, _term)
    signal.signal(signal.SIGINT, _term)
    try:
        runner.serve_forever()
    except BrokerError:
        return 1  # lost the broker; the supervisor will restart us
    return 0


def _install_crash_injection(runner: Runner) -> None:
    """Test harness hook: die (SIGKILL) after the N-th checkpoint commit.

    Activated through FLOWD_CRASH_AFTER_CHECKPOINTS; used by the restart/kill
    injection tests to stop a worker exactly at a step boundary.
    """
    raw = os.environ.get("FLOWD_CRASH_AFTER_CHECKPOINTS")
    if not raw:
        return
    remaining = int(raw)
    store = runner.store
    original = store.save_checkpoint

    def wrapped(node_id, payload):
        nonlocal remaining
        version = original(node_id, payload)
        remaining -= 1
        if remaining < 0:
            os.kill(os.getpid(), signal.SIGKILL)
        return version

    store.save_checkpoint = wrapped  # type: ignore[method-assign]


# -- supervisor -----------------------------------------------------------------


class WorkerPool:
    """Manages worker OS processes; crashed workers are restarted."""

    def __init__(self, profile: Profile, count: int, slots: int | None = None):
        self.profile = profile
        self.slots = slots if slots is not None else profile.get("slots")
        self.desired = count
        self.workers: list[subprocess.Popen] = []
        self._lock = threading.Lock()
        self._stopping = False

    def _spawn(self) -> subprocess.Popen:
        cmd = [sys.executable, "-m", "flowd.cli", "--profile", self.profile.path,
               "worker", "run", "--slots", str(self.slots)]
        return subprocess.Popen(cmd, env=os.environ.copy())

    def start(self) -> None:
        with self._lock:
            while len(self.workers) < self.desired:
                self.workers.append(self._spawn())

    def scale(self, count: int) -> dict:
        cap = self.profile.get("max_store_connections")
        if count > cap:
            return {"ok": False,
                    "error": f"refusing to scale to {count} workers: store "
                             f"connection budget is {cap}"}
        with self._lock:
            self.desired = count
            while len(self.workers) < self.desired:
                self.workers.append(self._spawn())
            while len(self.workers) > self.desired:
                worker = self.workers.pop()
                worker.terminate()  # graceful: finish current step, release leases
        return {"ok": True, "workers": self.desired}

    def monitor(self) -> None:
        """Restart any worker that exited without being asked to."""
        with self._lock:
            for index, worker in enumerate(list(self.workers)):
                if worker.poll() is not None and not self._stopping:
                    self.workers[index] = self._spawn()

    def stop(self) -> None:
        with self._lock:
            self._stopping = True
            for worker in self.workers:
                worker.terminate()
            deadline = time.monotonic() + 10.0
            for worker in self.workers:
                remaining = max(0.1, deadline - time.monotonic())
                try:
                    worker.wait(timeout=remaining)
                except subprocess.TimeoutExpired:
                    worker.kill()
            self.workers.clear()

    def statuses(self) -> list[dict]:
        with self._lock:
            return [{"pid": w.pid, "alive": w.poll() is None} for w in self.workers]


def supervisor_main(profile: Profile, workers: int | None = None,
                    slots: int | None = None, own_broker: bool = True) -> int:
    """Run the daemon supervisor until asked to stop."""
    workers = workers if workers is not None else profile.get("workers")
    broker_proc: subprocess.Popen | None = None
    if own_broker and not os.path.exists(profile.broker_socket):
        broker_proc = subprocess.Popen(
            [sys.executable, "-m", "flowd.cli", "--profile", profile.path,
             "broker", "run"], env=os.environ.copy())
        if not wait_for_socket(profile.broker_socket):
            print("daemon: broker failed to start", file=sys.stderr)
            return 2
    pool = WorkerPool(profile, workers, slots)
    pool.start()
    comm = Communicator.connect(profile.broker_socket, "daemon",
                                f"daemon-{uuid.uuid4().hex[:8]}")
    with open(profile.daemon_pidfile, "w", encoding="utf-8") as fh:
        fh.write(str(os.getpid()))
    stop_flag = threading.Event()

    def _term(signum, frame):
        stop_flag.set()

    signal.signal(signal.SIGTERM, _term)
    signal.signal(signal.SIGINT, _term)
    try:
        while not stop_flag.is_set():
            try:
                frame = comm.mailbox.get(timeout=0.5)
            except Exception:
                frame = None
            if frame is not None and frame.get("type") == wire.DAEMON_CTL:
                _handle_control(comm, pool, frame, stop_flag)
            if frame is not None and frame.get("type") == "_disconnected":
                break
            pool.monitor()
    finally:
        pool.stop()
        try:
            comm.close()
        except Exception:
            pass
        if broker_proc is not None:
            broker_proc.terminate()
            try:
                broker_proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                broker_proc.kill()
        try:
            os.unlink(profile.daemon_pidfile)
        except FileNotFoundError:
            pass
    return 0


def _handle_control(comm: Communicator, pool: WorkerPool, frame: dict,
                    stop_flag: threading.Event) -> None:
    command = frame.get("command")
    correlation = frame.get("correlation")
    if command == "status":
        payload = {"ok": True, "workers": pool.statuses(), "desired": pool.desired}
    elif command == "scale":
        payload = pool.scale(int(frame.get("args", {}).get("workers", pool.desired)))
    elif command == "stop":
        payload = {"ok": True}
        stop_flag.set()
    else:
        payload = {"ok": False, "error": f"unknown daemon command {command!r}"}
    if correlation:
        comm.rpc_reply(correlation, payload)


def start_daemon_detached(profile: Profile, workers: int | None = None) -> int:
    """Launch the supervisor as a detached background process; returns its pid."""
    cmd = [sys.executable, "-m", "flowd.cli", "--profile", profile.path,
           "daemon", "supervise"]
    if workers is not None:
        cmd += ["--workers", str(workers)]
    proc = subprocess.Popen(cmd, env=os.environ.copy(),
                            start_new_session=True,
                            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    return proc.pid
