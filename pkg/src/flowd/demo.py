"""Built-in example processes.

Small, deterministic process definitions used by the documentation, the CLI
demos and the verification suite. They are importable from every worker, so
multi-process tests reference them by qualified name.
"""

from __future__ import annotations

from .calcjob import CalcJob, JobTemplate
from .functions import calc_function, work_function
from .outline import if_, while_
from .values import Float, Int, Str
from .workchain import ToContext, WorkChain


@calc_function(input_types={"a": Int, "b": Int})
def add(a, b):
    return a + b


@calc_function(input_types={"a": Int, "b": Int})
def multiply(a, b):
    return a * b


@work_function
def add_multiply(x, y, z):
    total = add(x, y)
    product = multiply(total, z)
    return product


class FizzBuzzChain(WorkChain):
    """Report the numbers 0..limit, replacing multiples of 3/5/15 with
    fizz/buzz/fizzbuzz."""

    @classmethod
    def define(cls, spec):
        super().define(spec)
        spec.input("limit", valid_type=Int, default=Int(100), required=False)
        spec.outline(
            cls.initialize_to_zero,
            while_(cls.is_less_than_or_equal_to_limit)(
                if_(cls.is_multiple_of_three_and_five)(
                    cls.report_fizz_buzz,
                ).elif_(cls.is_multiple_of_three)(
                    cls.report_fizz,
                ).elif_(cls.is_multiple_of_five)(
                    cls.report_buzz,
                ).else_(
                    cls.report_n,
                ),
                cls.increment_by_one,
            ),
        )

    def initialize_to_zero(self):
        self.ctx.n = 0

    def is_less_than_or_equal_to_limit(self):
        return self.ctx.n <= self.inputs["limit"].value

    def is_multiple_of_three_and_five(self):
        return self.ctx.n % 15 == 0

    def is_multiple_of_three(self):
        return self.ctx.n % 3 == 0

    def is_multiple_of_five(self):
        return self.ctx.n % 5 == 0

    def report_fizz_buzz(self):
        self.report("fizzbuzz")

    def report_fizz(self):
        self.report("fizz")

    def report_buzz(self):
        self.report("buzz")

    def report_n(self):
        self.report(str(self.ctx.n))

    def increment_by_one(self):
        self.ctx.n += 1


class AddChain(WorkChain):
    """Single-step chain computing a + b through a calculation function."""

    @classmethod
    def define(cls, spec):
        super().define(spec)
        spec.input("a", valid_type=Int)
        spec.input("b", valid_type=Int)
        spec.output("sum", valid_type=Int, required=True)
        spec.outline(cls.compute)

    def compute(self):
        self.out("sum", add(self.inputs["a"], self.inputs["b"]))


class NestedAddChain(WorkChain):
    """Submits an AddChain child and relays its result."""

    @classmethod
    def define(cls, spec):
        super().define(spec)
        spec.expose_inputs(AddChain)
        spec.output("sum", valid_type=Int, required=True)
        spec.outline(cls.launch, cls.collect)

    def launch(self):
        child_inputs = self.spec().exposed_inputs(self.inputs, AddChain)
        child = self.submit(AddChain, **child_inputs)
        return ToContext(child=child)

    def collect(self):
        self.out("sum", self.ctx.child.outputs["sum"])


class SixStepChain(WorkChain):
    """Deterministic six-step chain used by the checkpoint-resume drills.

    Mixes context mutation, nested calculation functions (extra provenance)
    and a final recorded output.
    """

    @classmethod
    def define(cls, spec):
        super().define(spec)
        spec.input("x", valid_type=Int, default=Int(1), required=False)
        spec.output("total", valid_type=Int, required=True)
        spec.outline(cls.step_one, cls.step_two, cls.step_three,
                     cls.step_four, cls.step_five, cls.step_six)

    def step_one(self):
        self.ctx.trail = ["one"]
        self.ctx.base = self.inputs["x"].value

    def step_two(self):
        self.ctx.trail.append("two")
        self.ctx.base += 10

    def step_three(self):
        self.ctx.trail.append("three")
        self.ctx.partial = add(Int(self.ctx.base), Int(7))

    def step_four(self):
        self.ctx.trail.append("four")
        self.ctx.base += int(self.ctx.partial.value)

    def step_five(self):
        self.ctx.trail.append("five")
        self.ctx.total = multiply(self.ctx.partial, Int(3))

    def step_six(self):
        self.ctx.trail.append("six")
        self.out("total", self.ctx.total)


class EchoJob(CalcJob):
    """Ships a payload to the simulated computer and parses the echoed file."""

    @classmethod
    def define(cls, spec):
        super().define(spec)
        spec.input("payload", valid_type=Str)
        spec.input("walltime", valid_type=(Int, Float), default=Int(0),
                   required=False)
        spec.output("result", valid_type=Str, required=False)
        spec.exit_code(410, "ERROR_BAD_OUTPUT", "the output file signals failure")
        spec.exit_code(411, "ERROR_MISSING_OUTPUT", "no output file was retrieved")

    def job_command(self) -> list[str]:
        return ["echo", "job.in", "job.out"]

    def prepare(self) -> JobTemplate:
        return JobTemplate(
            files={"job.in": self.inputs["payload"].value},
            command=self.job_command(),
            walltime=float(self.inputs["walltime"].value),
            retrieve=["job.out"],
        )

    def parse(self, retrieved):
        if "job.out" not in retrieved.files:
            return self.exit_codes.ERROR_MISSING_OUTPUT
        content = retrieved.read("job.out")
        if content.startswith("ERROR"):
            return self.exit_codes.ERROR_BAD_OUTPUT
        self.out("result", Str(content))
        return None


class BadOutputJob(EchoJob):
    """Echo variant whose simulated code always produces failing output."""

    def job_command(self) -> list[str]:
        return ["fail", "job.out"]
