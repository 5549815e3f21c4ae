"""Process state machine: states, the allowed transition set, terminality."""

from __future__ import annotations

from enum import Enum


class ProcessState(str, Enum):
    CREATED = "created"
    RUNNING = "running"
    WAITING = "waiting"
    FINISHED = "finished"
    EXCEPTED = "excepted"
    KILLED = "killed"

    def __str__(self) -> str:  # attribute-friendly lowercase form
        return self.value


TERMINAL_STATES = frozenset(
    {ProcessState.FINISHED, ProcessState.EXCEPTED, ProcessState.KILLED}
)

# Exactly the edges of the process state diagram; everything else faults.
ALLOWED_TRANSITIONS: dict[ProcessState, frozenset[ProcessState]] = {
    ProcessState.CREATED: frozenset(
        {ProcessState.RUNNING, ProcessState.EXCEPTED, ProcessState.KILLED}
    ),
    ProcessState.RUNNING: frozenset(
        {
            ProcessState.RUNNING,
            ProcessState.WAITING,
            ProcessState.FINISHED,
            ProcessState.EXCEPTED,
            ProcessState.KILLED,
        }
    ),
    ProcessState.WAITING: frozenset(
        {ProcessState.RUNNING, ProcessState.EXCEPTED, ProcessState.KILLED}
    ),
    ProcessState.FINISHED: frozenset(),
    ProcessState.EXCEPTED: frozenset(),
    ProcessState.KILLED: frozenset(),
}


class EngineError(Exception):
    """Internal engine fault."""


class InvalidTransition(EngineError):
    def __init__(self, current: ProcessState, requested: ProcessState):
        super().__init__(f"transition {current.value} -> {requested.value} is not allowed")
        self.current = current
        self.requested = requested


def check_transition(current: ProcessState, requested: ProcessState) -> None:
    if requested not in ALLOWED_TRANSITIONS[current]:
        raise InvalidTransition(current, requested)


def is_terminal(state: ProcessState) -> bool:
    return state in TERMINAL_STATES
