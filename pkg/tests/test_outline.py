"""Outline DSL compilation and cursor-interpreter equivalence."""

from __future__ import annotations

import json
import random

import pytest

from flowd.harness import reference_outline_eval
from flowd.outline import (
    IfBlock,
    OutlineCursor,
    OutlineError,
    OutlineProgram,
    Step,
    While,
    compile_outline,
    if_,
    while_,
)


def s(name):
    fn = lambda self: None  # noqa: E731
    fn.__name__ = name
    return fn


class TestCompilation:
    def test_plain_steps(self):
        program = compile_outline([s("one"), s("two")])
        assert [i.name for i in program.root] == ["one", "two"]

    def test_while_and_if(self):
        program = compile_outline([
            s("init"),
            while_(s("cond"))(
                if_(s("both"))(s("fizzbuzz"))
                .elif_(s("three"))(s("fizz"))
                .elif_(s("five"))(s("buzz"))
                .else_(s("plain")),
                s("incr"),
            ),
        ])
        loop = program.root[1]
        assert isinstance(loop, While) and loop.condition == "cond"
        branch = loop.body[0]
        assert isinstance(branch, IfBlock)
        assert [c for c, _ in branch.branches] == ["both", "three", "five", None]

    def test_while_requires_body(self):
        with pytest.raises(OutlineError):
            compile_outline([while_(s("cond"))])

    def test_misplaced_elif(self):
        builder = if_(s("a"))(s("x"))
        builder.else_(s("y"))
        with pytest.raises(OutlineError):
            builder.elif_(s("b"))

    def test_name_validation(self):
        program = compile_outline([s("missing_step")])

        class Host:
            pass

        with pytest.raises(OutlineError):
            program.validate_against(Host)


class TestCursor:
    def run_program(self, program: OutlineProgram, conditions: dict) -> list[str]:
        """Drive the cursor interpreter over scripted conditions (queues)."""
        state = {name: list(script) for name, script in conditions.items()}

        def evaluate(name: str) -> bool:
            queue = state[name]
            return queue.pop(0) if queue else False

        cursor = OutlineCursor()
        trace = []
        while True:
            step = cursor.seek_step(program, evaluate)
            if step is None:
                break
            trace.append(step)
            cursor.advance()
        return trace

    def test_empty_program(self):
        assert self.run_program(OutlineProgram([]), {}) == []

    def test_false_while_never_enters(self):
        program = compile_outline([while_(s("never"))(s("body"))])
        assert self.run_program(program, {"never": [False]}) == []

    def test_while_iterations(self):
        program = compile_outline([while_(s("cond"))(s("a"), s("b"))])
        trace = self.run_program(program, {"cond": [True, True, False]})
        assert trace == ["a", "b", "a", "b"]

    def test_if_branch_selection(self):
        program = compile_outline([
            if_(s("c1"))(s("x")).elif_(s("c2"))(s("y")).else_(s("z"))
        ])
        assert self.run_program(program, {"c1": [True], "c2": []}) == ["x"]
        assert self.run_program(program, {"c1": [False], "c2": [True]}) == ["y"]
        assert self.run_program(program, {"c1": [False], "c2": [False]}) == ["z"]

    def test_if_without_else_can_skip(self):
        program = compile_outline([if_(s("c"))(s("x")), s("after")])
        assert self.run_program(program, {"c": [False]}) == ["after"]

    def test_cursor_serialization_round_trip(self):
        program = compile_outline([
            s("init"),
            while_(s("cond"))(s("a"), if_(s("inner"))(s("b")), s("c")),
        ])
        scripted = {"cond": [True], "inner": [True]}
        state = {k: list(v) for k, v in scripted.items()}

        def evaluate(name):
            queue = state[name]
            return queue.pop(0) if queue else False

        cursor = OutlineCursor()
        executed = []
        for _ in range(3):  # init, a, b
            executed.append(cursor.seek_step(program, evaluate))
            cursor.advance()
        doc = json.loads(json.dumps(cursor.to_doc()))
        restored = OutlineCursor.from_doc(doc)
        rest = []
        while True:
            step = restored.seek_step(program, evaluate)
            if step is None:
                break
            rest.append(step)
            restored.advance()
        assert executed == ["init", "a", "b"]
        assert rest == ["c"]


def random_program(rng: random.Random, depth: int, counters: dict) -> list:
    """Random small outline; conditions are named countdown switches."""
    block = []
    for _ in range(rng.randrange(1, 4)):
        roll = rng.random()
        if depth >= 3 or roll < 0.45:
            block.append(Step(f"step{counters['step']}"))
            counters["step"] += 1
        elif roll < 0.7:
            name = f"cond{counters['cond']}"
            counters["cond"] += 1
            counters.setdefault("loops", {})[name] = rng.randrange(0, 3)
            block.append(While(name, random_program(rng, depth + 1, counters)))
        else:
            branches = []
            for _ in range(rng.randrange(1, 3)):
                name = f"cond{counters['cond']}"
                counters["cond"] += 1
                counters.setdefault("switch", {})[name] = rng.random() < 0.5
                branches.append((name, random_program(rng, depth + 1, counters)))
            if rng.random() < 0.5:
                branches.append((None, random_program(rng, depth + 1, counters)))
            block.append(IfBlock(branches))
    return block


class TestStructuralInduction:
    def test_interpreter_matches_reference_on_random_programs(self):
        """Engine cursor interpreter vs the direct recursive evaluator."""
        rng = random.Random(42)
        for trial in range(200):
            counters = {"step": 0, "cond": 0}
            program = OutlineProgram(random_program(rng, 0, counters))

            def make_env():
                remaining = dict(counters.get("loops", {}))
                switches = dict(counters.get("switch", {}))

                def condition(name):
                    if name in remaining:
                        if remaining[name] > 0:
                            remaining[name] -= 1
                            return True
                        return False
                    return switches.get(name, False)

                return condition

            # reference trace
            steps = {f"step{i}": (lambda ctx, i=i: ctx.append(f"step{i}"))
                     for i in range(counters["step"])}
            ref_condition = make_env()
            conditions = {name: (lambda ctx, n=name: ref_condition(n))
                          for name in self._condition_names(program)}
            ref_trace: list = []
            trace = reference_outline_eval(program, steps,
                                           {k: (lambda ctx, k=k: conditions[k](ctx))
                                            for k in conditions},
                                           ref_trace)

            # engine trace
            engine_condition = make_env()
            cursor = OutlineCursor()
            engine_trace = []
            while True:
                step = cursor.seek_step(program, engine_condition)
                if step is None:
                    break
                engine_trace.append(step)
                cursor.advance()
            assert engine_trace == trace, f"trial {trial}"

    @staticmethod
    def _condition_names(program: OutlineProgram) -> set:
        return program.condition_names()
