"""flowd: a fault-tolerant, provenance-recording workflow engine.

Processes (function processes, work chains, calculation jobs) run through a
checkpointed state machine; every execution leaves a queryable provenance
graph behind. A file-backed store and an embedded durable broker replace the
external database and message-broker services, and a simulated remote
computer with fault injection stands in for real clusters.
"""

from .calcjob import CalcJob, JobTemplate
from .config import Profile, create_profile, load_profile
from .functions import calc_function, work_function
from .outline import if_, while_
from .process import Process, TerminalReport
from .runner import Runner, current_runner, local_run, runtime, submit
from .spec import (
    ExitCode,
    Port,
    PortNamespace,
    PortValidationError,
    ProcessSpec,
    SpecError,
    register_validator,
    validate,
)
from .states import ProcessState
from .store import Store
from .values import Bool, Bytes, Dict, Float, Folder, Int, List, Str, to_value
from .workchain import AwaitableRef, Context, ToContext, WorkChain, append_

__version__ = "0.1.0"

__all__ = [
    "AwaitableRef",
    "Bool",
    "Bytes",
    "CalcJob",
    "Context",
    "Dict",
    "ExitCode",
    "Float",
    "Folder",
    "Int",
    "JobTemplate",
    "List",
    "Port",
    "PortNamespace",
    "PortValidationError",
    "Process",
    "ProcessSpec",
    "ProcessState",
    "Profile",
    "Runner",
    "SpecError",
    "Store",
    "Str",
    "TerminalReport",
    "ToContext",
    "WorkChain",
    "append_",
    "calc_function",
    "create_profile",
    "current_runner",
    "if_",
    "load_profile",
    "local_run",
    "register_validator",
    "runtime",
    "submit",
    "to_value",
    "validate",
    "while_",
    "work_function",
]
