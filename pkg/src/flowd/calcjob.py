"""Remote calculation jobs.

A calculation job walks the upload -> submit -> update -> retrieve -> parse
lifecycle against a (simulated) remote computer. The four transport stages
run only when the per-worker transport queue grants an open connection; each
stage is wrapped in the exponential-back-off retrier, and exhausting retries
pauses the process instead of excepting it. Parsing happens locally.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .process import Process
from .spec import ExitCode, ProcessSpec
from .simulation import SchedulerError, TransportError, render_job_script
from .states import EngineError, ProcessState
from .transport import BackoffPolicy, BackoffRetry
from .values import Folder, Str

STAGES = ("upload", "submit", "update", "retrieve", "parse")


@dataclass
class JobTemplate:
    """What one job ships to the remote resource and wants back."""

    files: dict = field(default_factory=dict)     # name -> text content
    command: list = field(default_factory=list)   # argv for the simulated code
    walltime: float = 0.0                          # simulated run duration
    retrieve: list = field(default_factory=list)  # file names to bring home


class CalcJob(Process):
    kind = "calc_job"

    @classmethod
    def define(cls, spec: ProcessSpec) -> None:
        super().define(spec)
        spec.input("computer", valid_type=Str)
        spec.output("retrieved", valid_type=Folder, required=True)
        spec.outputs.dynamic = True  # parser attaches arbitrary labelled outputs

    def prepare(self) -> JobTemplate:
        raise NotImplementedError

    def parse(self, retrieved: Folder):
        """Return None (success), a positive int, or an ExitCode."""
        return None

    # -- lifecycle ------------------------------------------------------------

    def __init__(self, runner, node_id, inputs, state=ProcessState.CREATED):
        super().__init__(runner, node_id, inputs, state)
        self.stage: str = "upload"
        self.job_id: str | None = None
        self.template: JobTemplate | None = None
        self._parked = False
        self._retrier: BackoffRetry | None = None

    @property
    def computer_name(self) -> str:
        return self.inputs["computer"].value

    @property
    def workdir(self) -> str:
        return f"jobs/{self.node_id}"

    def on_run(self) -> None:
        self.stage = "upload"
        self.template = self.prepare()
        self.transition_to(ProcessState.WAITING)
        self._launch_stage()

    def resume(self) -> None:
        if self.state is ProcessState.CREATED:
            self.start()
            return
        if self.state is ProcessState.RUNNING:
            if self.stage == "parse":
                self.runner.call_soon(self._do_parse, process=self)
            else:
                # Interrupted before reaching the waiting state: rebuild the
                # deterministic template and re-enter the stage sequence.
                self.template = self.prepare()
                self.transition_to(ProcessState.WAITING)
                self._launch_stage()
            return
        if self.state is ProcessState.WAITING:
            if self.paused:
                self._parked = True
            else:
                self._launch_stage()

    def on_played(self) -> None:
        if self._parked:
            self._parked = False
            self._launch_stage()

    def _launch_stage(self) -> None:
        """(Re-)enter the current stage with a fresh retry controller."""
        if self.is_terminal:
            return
        if self.paused:
            self._parked = True
            return
        if self.stage == "parse":
            self.runner.call_soon(self._do_parse, process=self)
            return
        policy = self.runner.backoff_policy
        self._retrier = BackoffRetry(
            self.runner.clock, policy,
            attempt=self._attempt_stage,
            on_exhausted=self._stage_exhausted,
            on_retry_scheduled=self._log_retry,
        )
        self._retrier.start()

    def _log_retry(self, retry: int, when: float, error: Exception) -> None:
        self.log("WARNING", f"stage {self.stage} failed ({error}); retry "
                            f"{retry} scheduled at t={when}")

    def _attempt_stage(self) -> None:
        if self.is_terminal:
            return
        if self.paused:
            self._parked = True
            return
        if self.stage == "update":
            registry = self.runner.poll_registry(self.computer_name)
            registry.register(self.job_id, self._on_job_state)
        else:
            queue = self.runner.transport_queue(self.computer_name)
            queue.request(self._on_transport)

    def _on_transport(self, transport_or_error) -> None:
        if self.is_terminal:
            return
        if self.paused:
            self._parked = True
            return
        if isinstance(transport_or_error, Exception):
            self._retrier.failed(transport_or_error)
            return
        stage_fn = getattr(self, f"_stage_{self.stage}")
        try:
            stage_fn(transport_or_error)
        except TransportError as exc:
            self._retrier.failed(exc)
        except Exception as exc:  # coding errors are not retried
            self.fail_with_exception(exc)
        else:
            self._retrier.succeeded()
            self._advance_stage()

    def _advance_stage(self) -> None:
        self.stage = STAGES[STAGES.index(self.stage) + 1]
        self.persist()
        self._launch_stage()

    def _stage_exhausted(self, error: Exception) -> None:
        self._parked = True
        message = (f"stage {self.stage} gave up after "
                   f"{self.runner.backoff_policy.max_retries} retries: {error}")
        self.log("ERROR", message)
        self.pause(message)

    # -- transport stages ----------------------------------------------------

    def _stage_upload(self, transport) -> None:
        transport.makedirs(self.workdir)
        for name, content in self.template.files.items():
            transport.put_file(f"{self.workdir}/{name}", content)
        script = render_job_script(self.template.command, self.template.walltime)
        transport.put_file(f"{self.workdir}/job.sh", script)

    def _stage_submit(self, transport) -> None:
        self.job_id = transport.submit_job(self.workdir)
        self.runner.store.set_attributes(self.node_id, {"scheduler_job_id": self.job_id})

    def _on_job_state(self, state_or_error) -> None:
        if self.is_terminal:
            return
        if self.paused:
            self._parked = True
            return
        if isinstance(state_or_error, Exception):
            self._retrier.failed(state_or_error)
            return
        state = state_or_error
        if state == "done":
            self._retrier.succeeded()
            self._advance_stage()  # -> retrieve
        elif state in ("queued", "running"):
            self._retrier.succeeded()  # healthy poll; stay registered
        else:
            self._retrier.failed(SchedulerError(f"job {self.job_id} reported "
                                                f"state {state!r}"))

    def _stage_retrieve(self, transport) -> None:
        present = set(transport.listdir(self.workdir))
        files = {}
        for name in self.template.retrieve:
            if name in present:
                files[name] = transport.get_file(f"{self.workdir}/{name}")
        self.out("retrieved", Folder(files))
        self.commit_outputs()

    # -- local parse stage -------------------------------------------------------

    def _do_parse(self) -> None:
        if self.is_terminal:
            return
        if self.state is ProcessState.WAITING:
            self.transition_to(ProcessState.RUNNING)
        retrieved_id = self.runner.store.outputs_of(self.node_id).get("retrieved")
        folder = self.runner.store.node(retrieved_id).value()
        outcome = self.parse(folder)
        self.commit_outputs()
        if outcome is None:
            self.finish(0)
        elif isinstance(outcome, ExitCode):
            self.finish(int(outcome.status), outcome.message)
        elif isinstance(outcome, int) and not isinstance(outcome, bool) and outcome > 0:
            self.finish(outcome)
        else:
            raise EngineError(f"parser returned {outcome!r}; expected None, a "
                              "positive int or an exit code")

    # -- control --------------------------------------------------------------

    def kill(self, reason: str = "killed by user") -> bool:
        if self.is_terminal:
            return False
        self._cancel_remote()
        return super().kill(reason)

    def _cancel_remote(self) -> None:
        if self.job_id is None or self.stage not in ("submit", "update"):
            return
        computer = self.runner.get_computer(self.computer_name)
        try:
            transport = computer.open_transport()
            try:
                transport.cancel_job(self.job_id)
            finally:
                transport.close()
        except TransportError:
            pass  # best effort; the simulated job will be orphaned

    # -- persistence ------------------------------------------------------------

    def save_instance_state(self) -> dict:
        return {
            "stage": self.stage,
            "job_id": self.job_id,
            "template": asdict(self.template) if self.template else None,
            "parked": self._parked,
        }

    def load_instance_state(self, extras: dict) -> None:
        self.stage = extras.get("stage", "upload")
        self.job_id = extras.get("job_id")
        template = extras.get("template")
        self.template = JobTemplate(**template) if template else None
        self._parked = extras.get("parked", False)
