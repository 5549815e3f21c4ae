"""Work chains: stepping, context, awaitables, aborting, outputs, resume."""

from __future__ import annotations

import itertools

import pytest

from flowd import Int, ProcessState, Store, Str, local_run
from flowd.demo import AddChain, FizzBuzzChain, NestedAddChain, add
from flowd.harness import fizzbuzz_oracle, graph_isomorphic, provenance_graph
from flowd.runner import Runner
from flowd.workchain import ToContext, WorkChain, append_


class TestFizzBuzz:
    def test_full_run_matches_oracle(self, profile):
        report = local_run(FizzBuzzChain, profile=profile, limit=Int(100))
        assert report.state is ProcessState.FINISHED
        assert report.exit_status == 0
        store = Store(profile.store_path, sync=False)
        logs = store.read_logs(report.node_id, level="REPORT")
        assert len(logs) == 101
        assert [r.message for r in logs] == fizzbuzz_oracle(100)

    def test_loop_iteration_count(self, profile):
        report = local_run(FizzBuzzChain, profile=profile, limit=Int(10))
        store = Store(profile.store_path, sync=False)
        assert len(store.read_logs(report.node_id, level="REPORT")) == 11


class AbortWithInteger(WorkChain):
    @classmethod
    def define(cls, spec):
        super().define(spec)
        spec.outline(cls.abort_from_this_step, cls.never_reached)

    def abort_from_this_step(self):
        self.report("work chain will be terminated")
        return 404

    def never_reached(self):
        self.report("should not happen")


class AbortWithExitCode(WorkChain):
    @classmethod
    def define(cls, spec):
        super().define(spec)
        spec.exit_code(404, "INEVITABLE_ERROR", "this was unavoidable")
        spec.outline(cls.abort_straightaway)

    def abort_straightaway(self):
        self.report("work chain will be terminated")
        return self.exit_codes.INEVITABLE_ERROR


class TestAborting:
    def test_integer_return_sets_exit_status(self, profile):
        report = local_run(AbortWithInteger, profile=profile)
        assert report.state is ProcessState.FINISHED
        assert report.exit_status == 404
        store = Store(profile.store_path, sync=False)
        messages = [r.message for r in store.read_logs(report.node_id, level="REPORT")]
        assert messages == ["work chain will be terminated"]

    def test_exit_code_return_sets_status_and_message(self, profile):
        report = local_run(AbortWithExitCode, profile=profile)
        assert report.state is ProcessState.FINISHED
        assert report.exit_status == 404
        assert report.exit_message == "this was unavoidable"

    def test_non_positive_return_is_engine_fault(self, profile):
        class BadReturn(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.outline(cls.go)

            def go(self):
                return 0

        report = local_run(BadReturn, profile=profile)
        assert report.state is ProcessState.EXCEPTED

    def test_step_exception_lands_excepted_with_trace(self, profile):
        class Boom(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.outline(cls.go)

            def go(self):
                raise RuntimeError("kaboom")

        report = local_run(Boom, profile=profile)
        assert report.state is ProcessState.EXCEPTED
        store = Store(profile.store_path, sync=False)
        logs = store.read_logs(report.node_id, level="ERROR")
        assert logs and "kaboom" in logs[0].message


class TestSubprocesses:
    def test_to_context_assign(self, profile):
        report = local_run(NestedAddChain, profile=profile, a=Int(2), b=Int(3))
        assert report.state is ProcessState.FINISHED
        assert report.outputs["sum"].value == 5
        store = Store(profile.store_path, sync=False)
        (parent,) = [n for n in store.nodes(kind="work_chain")
                     if n.id == report.node_id]
        called = [n for _, n in store.traverse(parent.id, "outgoing", ("CALL",))]
        assert len(called) == 1

    def test_submit_missing_required_input_excepts_step(self, profile):
        class BadSubmit(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.outline(cls.go)

            def go(self):
                return ToContext(child=self.submit(AddChain, a=Int(1)))  # b missing

        report = local_run(BadSubmit, profile=profile)
        assert report.state is ProcessState.EXCEPTED

    def test_append_collects_in_registration_order(self, profile):
        class FanOut(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.outline(cls.launch, cls.collect)

            def launch(self):
                for i in range(10):
                    self.to_context(children=append_(
                        self.submit(AddChain, a=Int(i), b=Int(0))))

            def collect(self):
                values = [child.outputs["sum"].value for child in self.ctx.children]
                self.out("values", values)

        report = local_run(FanOut, profile=profile)
        assert report.state is ProcessState.FINISHED
        assert report.outputs["values"].value == list(range(10))

    def test_abort_combined_with_awaitables_is_fault(self, profile):
        class Confused(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.outline(cls.go)

            def go(self):
                self.to_context(child=self.submit(AddChain, a=Int(1), b=Int(1)))
                return 404

        report = local_run(Confused, profile=profile)
        assert report.state is ProcessState.EXCEPTED


class TestAwaitableResolution:
    def make_waiting_parent(self, make_runner, count=3):
        class Collector(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.outline(cls.launch, cls.collect)

            def launch(self):
                for i in range(count):
                    self.to_context(children=append_(
                        self.submit(AddChain, a=Int(i), b=Int(10))))

            def collect(self):
                self.out("order", [c.id for c in self.ctx.children])

        runner = make_runner(slots=1)  # children never admitted
        node_id = runner.submit_root(Collector, {})
        runner._pump_local()
        while runner._ready:
            runner._run_ready_one()
        parent = runner.processes[node_id]
        assert parent.state is ProcessState.WAITING
        return runner, parent

    @pytest.mark.parametrize("order", list(itertools.permutations(range(3))))
    def test_append_order_invariant_under_completion_order(self, make_runner, order):
        runner, parent = self.make_waiting_parent(make_runner)
        children = [a.child_id for a in parent._awaitables]
        registration = list(children)
        for index in order:
            parent.on_child_terminated(children[index])
        while runner._ready:
            runner._run_ready_one()
        report = runner.report_for(parent.node_id)
        assert report.outputs["order"].value == registration

    def test_partial_resolution_stays_waiting(self, make_runner):
        runner, parent = self.make_waiting_parent(make_runner, count=2)
        children = [a.child_id for a in parent._awaitables]
        parent.on_child_terminated(children[0])
        assert parent.state is ProcessState.WAITING
        parent.on_child_terminated(children[1])
        assert parent.state is ProcessState.RUNNING

    def test_duplicate_terminated_event_ignored(self, make_runner):
        runner, parent = self.make_waiting_parent(make_runner, count=2)
        children = [a.child_id for a in parent._awaitables]
        parent.on_child_terminated(children[0])
        parent.on_child_terminated(children[0])  # redelivery
        assert parent.state is ProcessState.WAITING
        parent.on_child_terminated(children[1])
        while runner._ready:
            runner._run_ready_one()
        report = runner.report_for(parent.node_id)
        assert len(report.outputs["order"].value) == 2

    def test_unknown_child_event_logged_and_ignored(self, make_runner):
        runner, parent = self.make_waiting_parent(make_runner, count=1)
        parent.on_child_terminated("ffffffffffffffffffffffffffffffff")
        assert parent.state is ProcessState.WAITING


class TestConditionPurity:
    def test_condition_submitting_is_engine_fault(self, profile):
        class Sneaky(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                from flowd.outline import while_

                spec.outline(while_(cls.check)(cls.body))

            def check(self):
                self.submit(AddChain, a=Int(1), b=Int(1))
                return False

            def body(self):
                pass

        report = local_run(Sneaky, profile=profile)
        assert report.state is ProcessState.EXCEPTED

    def test_condition_recording_output_is_engine_fault(self, profile):
        class Sneaky(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                from flowd.outline import if_

                spec.outline(if_(cls.check)(cls.body))

            def check(self):
                self.out("x", Int(1))
                return True

            def body(self):
                pass

        report = local_run(Sneaky, profile=profile)
        assert report.state is ProcessState.EXCEPTED


class TestOutputs:
    def test_output_validated_and_return_linked(self, profile):
        report = local_run(AddChain, profile=profile, a=Int(2), b=Int(3))
        store = Store(profile.store_path, sync=False)
        returns = store.traverse(report.node_id, "outgoing", ("RETURN",))
        assert len(returns) == 1
        assert returns[0][0].label == "sum"
        assert store.node(returns[0][1]).attributes["value"] == 5

    def test_out_with_fresh_value_auto_stores_without_creator(self, profile):
        class Fresh(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.output("result", valid_type=Int)
                spec.outline(cls.go)

            def go(self):
                self.out("result", Int(5))

        report = local_run(Fresh, profile=profile)
        assert report.state is ProcessState.FINISHED
        store = Store(profile.store_path, sync=False)
        (result_id,) = [store.resolve(str(store.node(n).seq))
                        for _, n in store.traverse(report.node_id, "outgoing",
                                                   ("RETURN",))]
        assert store.traverse(result_id, "incoming", ("CREATE",)) == []

    def test_undeclared_label_on_non_dynamic_outputs_excepts(self, profile):
        class Undeclared(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.output("declared", valid_type=Int, required=False)
                spec.outline(cls.go)

            def go(self):
                self.out("mystery", Int(1))

        report = local_run(Undeclared, profile=profile)
        assert report.state is ProcessState.EXCEPTED

    def test_wrong_output_type_excepts(self, profile):
        class WrongType(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.output("n", valid_type=Int)
                spec.outline(cls.go)

            def go(self):
                self.out("n", Str("not an int"))

        report = local_run(WrongType, profile=profile)
        assert report.state is ProcessState.EXCEPTED

    def test_missing_required_output_fails_with_status_11(self, profile):
        class Forgetful(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.output("required_thing", valid_type=Int, required=True)
                spec.outline(cls.go)

            def go(self):
                self.report("doing nothing")

        report = local_run(Forgetful, profile=profile)
        assert report.state is ProcessState.FINISHED
        assert report.exit_status == 11
        assert "required output" in report.exit_message

    def test_unstorable_context_value_rejected_at_checkpoint(self, profile):
        class BadContext(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.outline(cls.go, cls.more)

            def go(self):
                self.ctx.handle = object()

            def more(self):
                pass

        report = local_run(BadContext, profile=profile)
        assert report.state is ProcessState.EXCEPTED
        store = Store(profile.store_path, sync=False)
        logs = store.read_logs(report.node_id, level="ERROR")
        assert logs and "not storable" in logs[0].message


class TestExposedWrapping:
    def test_parent_wraps_child_via_exposed_ports(self, profile):
        report = local_run(NestedAddChain, profile=profile, a=Int(4), b=Int(6))
        assert report.outputs["sum"].value == 10
        store = Store(profile.store_path, sync=False)
        graph = provenance_graph(store, report.node_id)
        # parent chain -> child chain -> calc function
        chains = [n for n in store.nodes(kind="work_chain")]
        assert len(chains) == 2


class TestLocalResume:
    def test_pause_persist_resume_in_fresh_runner(self, make_profile):
        class SelfPausing(WorkChain):
            @classmethod
            def define(cls, spec):
                super().define(spec)
                spec.output("done", valid_type=Int)
                spec.outline(cls.first, cls.second)

            def first(self):
                self.ctx.progress = "half"
                self.pause("taking a break")

            def second(self):
                self.out("done", Int(1))

        prof = make_profile()
        runner = Runner(prof)
        node_id = runner.submit_root(SelfPausing, {})
        runner.drain()
        store = runner.store
        assert store.node(node_id).attributes["process_state"] == "running"
        assert store.node(node_id).attributes["paused"] is True

        fresh = Runner(prof)
        fresh._continue(node_id)
        proc = fresh.processes[node_id]
        assert proc.paused and proc.ctx.progress == "half"
        proc.play()
        report = fresh.run_until_complete(node_id)
        assert report.state is ProcessState.FINISHED
        assert report.outputs["done"].value == 1

    def test_checkpoint_equivalence_local(self, make_profile):
        """Interrupt-by-discard after step k, resume in a fresh runner; the
        final graph must be isomorphic to an uninterrupted run."""
        from flowd.demo import SixStepChain

        ref_prof = make_profile()
        ref = local_run(SixStepChain, profile=ref_prof, x=Int(3))
        ref_store = Store(ref_prof.store_path, sync=False)
        ref_graph = provenance_graph(ref_store, ref.node_id)

        for boundary in range(1, 6):
            prof = make_profile()
            runner = Runner(prof)
            node_id = runner.submit_root(SixStepChain, {"x": Int(3)})
            runner._pump_local()
            steps = 0
            while runner._ready and steps < boundary + 1:
                runner._run_ready_one()
                steps += 1
            # discard the runner mid-flight; resume from the checkpoint
            fresh = Runner(prof)
            fresh._continue(node_id)
            report = fresh.run_until_complete(node_id)
            assert report.state is ProcessState.FINISHED
            graph = provenance_graph(fresh.store, node_id)
            assert graph_isomorphic(ref_graph, graph), f"boundary {boundary}"
