"""Profile configuration.

A profile is a directory holding the store, the broker socket and queue, the
remote namespaces of simulated computers and a `config.json`. The CLI locates
it through ``--profile`` or the FLOWD_PROFILE environment variable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

PROFILE_ENV = "FLOWD_PROFILE"

DEFAULTS: dict[str, Any] = {
    "slots": 100,
    "workers": 1,
    "time_mode": "auto",          # auto | manual | wall
    "heartbeat_period": 5.0,      # simulated seconds
    "heartbeat_wall_grace": 0.5,  # wall seconds a ping may be in flight
    "rpc_timeout": 10.0,          # wall seconds
    "backoff_initial_interval": 5.0,   # simulated seconds
    "backoff_max_retries": 5,
    "store_sync": True,
    "max_store_connections": 100,
    "load_modules": [],
    "computers": {},
}

COMPUTER_DEFAULTS: dict[str, Any] = {
    "transport": "simulated",
    "safe_interval": 30.0,
    "poll_interval": 5.0,
    "faults": [],
    "fault_seed": 0,
    "fail_probability": 0.0,
}


@dataclass
class Profile:
    path: str
    settings: dict = field(default_factory=dict)

    @property
    def store_path(self) -> str:
        return os.path.join(self.path, "store")

    @property
    def broker_socket(self) -> str:
        return os.path.join(self.path, "broker.sock")

    @property
    def queue_dir(self) -> str:
        return os.path.join(self.path, "queue")

    @property
    def remote_root(self) -> str:
        return os.path.join(self.path, "remote")

    @property
    def daemon_pidfile(self) -> str:
        return os.path.join(self.path, "daemon.pid")

    @property
    def broker_pidfile(self) -> str:
        return os.path.join(self.path, "broker.pid")

    def get(self, key: str) -> Any:
        if key in self.settings:
            return self.settings[key]
        return DEFAULTS[key]

    def computer(self, name: str) -> dict:
        computers = self.get("computers")
        if name not in computers:
            raise KeyError(f"computer {name!r} is not configured in this profile")
        merged = dict(COMPUTER_DEFAULTS)
        merged.update(computers[name])
        merged["name"] = name
        return merged

    def save(self) -> None:
        os.makedirs(self.path, exist_ok=True)
        with open(os.path.join(self.path, "config.json"), "w", encoding="utf-8") as fh:
            json.dump(self.settings, fh, indent=2, sort_keys=True)


def load_profile(path: str | None = None) -> Profile:
    path = path or os.environ.get(PROFILE_ENV)
    if not path:
        raise RuntimeError(
            "no profile given: pass --profile or set the FLOWD_PROFILE variable")
    path = os.path.abspath(path)
    config_file = os.path.join(path, "config.json")
    settings: dict = {}
    if os.path.exists(config_file):
        with open(config_file, "r", encoding="utf-8") as fh:
            settings = json.load(fh)
    return Profile(path=path, settings=settings)


def create_profile(path: str, **settings) -> Profile:
    profile = Profile(path=os.path.abspath(path), settings=settings)
    os.makedirs(profile.path, exist_ok=True)
    profile.save()
    return profile
