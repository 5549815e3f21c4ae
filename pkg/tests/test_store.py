"""Provenance store: nodes, links, attributes, logs, checkpoints, durability."""

from __future__ import annotations

import os

import pytest

from flowd.harness import data_acyclic, parse_dot
from flowd.store import IntegrityError, NotFoundError, Store, StoreError
from flowd.values import Int, Str


@pytest.fixture
def store(tmp_path):
    return Store(str(tmp_path / "store"))


class TestDataNodes:
    def test_create_and_read(self, store):
        node_id = store.create_data_node(Int(3))
        record = store.node(node_id)
        assert record.kind == "data"
        assert record.attributes["value"] == 3
        assert record.attributes["value_type"] == "int"
        assert record.value().value == 3

    def test_empty_string_valid(self, store):
        node_id = store.create_data_node(Str(""))
        assert store.node(node_id).attributes["value"] == ""

    def test_unregistered_value_rejected(self, store):
        with pytest.raises(Exception):
            store.create_data_node(object())

    def test_stored_value_reused(self, store):
        value = Int(7)
        first = store.create_data_node(value)
        second = store.create_data_node(value)
        assert first == second

    def test_content_hash_recorded(self, store):
        node_id = store.create_data_node(Int(3))
        assert store.node(node_id).attributes["content_hash"] == Int(3).content_hash()


class TestProcessNodes:
    def test_create_with_metadata(self, store):
        node_id = store.create_process_node("calc_function", {"label": "add"})
        record = store.node(node_id)
        assert record.attributes["process_state"] == "created"
        assert record.attributes["label"] == "add"

    def test_empty_metadata(self, store):
        node_id = store.create_process_node("work_chain", {})
        assert store.node(node_id).kind == "work_chain"

    def test_unknown_kind_rejected(self, store):
        with pytest.raises(StoreError):
            store.create_process_node("mystery")

    def test_sequential_ids(self, store):
        a = store.create_process_node("work_chain")
        b = store.create_data_node(Int(1))
        assert store.node(b).seq == store.node(a).seq + 1

    def test_resolve_by_seq_and_prefix(self, store):
        node_id = store.create_data_node(Int(1))
        seq = store.node(node_id).seq
        assert store.resolve(str(seq)) == node_id
        assert store.resolve(node_id[:10]) == node_id
        with pytest.raises(NotFoundError):
            store.resolve("999")


class TestLinks:
    def test_input_link(self, store):
        data = store.create_data_node(Int(3))
        proc = store.create_process_node("calc_function")
        store.add_link(data, proc, "INPUT", "a")
        assert store.traverse(proc, "incoming", ("INPUT",))[0][1] == data

    def test_create_uniqueness(self, store):
        proc_a = store.create_process_node("calc_function")
        proc_b = store.create_process_node("calc_function")
        data = store.create_data_node(Int(7))
        store.add_link(proc_a, data, "CREATE", "result")
        with pytest.raises(IntegrityError):
            store.add_link(proc_b, data, "CREATE", "result")

    def test_kind_compatibility(self, store):
        data = store.create_data_node(Int(1))
        calc = store.create_process_node("calc_function")
        chain = store.create_process_node("work_chain")
        with pytest.raises(IntegrityError):
            store.add_link(chain, data, "CREATE")  # work-type cannot create
        with pytest.raises(IntegrityError):
            store.add_link(calc, data, "RETURN")  # calc-type cannot return
        with pytest.raises(IntegrityError):
            store.add_link(calc, chain, "INPUT")  # INPUT source must be data
        with pytest.raises(IntegrityError):
            store.add_link(data, calc, "CALL")  # CALL connects processes

    def test_call_link(self, store):
        workfn = store.create_process_node("work_function")
        calc = store.create_process_node("calc_function")
        store.add_link(workfn, calc, "CALL")
        assert store.traverse(workfn, "outgoing", ("CALL",))[0][1] == calc

    def test_data_cycle_rejected(self, store):
        calc = store.create_process_node("calc_function")
        data = store.create_data_node(Int(1))
        store.add_link(calc, data, "CREATE", "out")
        with pytest.raises(IntegrityError):
            store.add_link(data, calc, "INPUT", "loop")
        assert data_acyclic(store)

    def test_traverse_directions_and_filters(self, store):
        data_a = store.create_data_node(Int(7))
        data_b = store.create_data_node(Int(5))
        calc = store.create_process_node("calc_function")
        store.add_link(data_a, calc, "INPUT", "a")
        store.add_link(data_b, calc, "INPUT", "b")
        incoming = {n for _, n in store.traverse(calc, "incoming", ("INPUT",))}
        assert incoming == {data_a, data_b}
        assert store.traverse(data_a, "outgoing", ("CALL",)) == []
        with pytest.raises(NotFoundError):
            store.traverse("missing", "incoming")


class TestAttributes:
    def test_exit_status_immutable_after_termination(self, store):
        proc = store.create_process_node("work_chain")
        store.set_attributes(proc, {"exit_status": 0, "process_state": "finished"})
        with pytest.raises(IntegrityError):
            store.set_attributes(proc, {"exit_status": 1})

    def test_attribute_update(self, store):
        proc = store.create_process_node("work_chain")
        store.set_attributes(proc, {"custom": 42})
        assert store.node(proc).attributes["custom"] == 42


class TestLogs:
    def test_append_and_read(self, store):
        proc = store.create_process_node("work_chain")
        store.append_log(proc, "REPORT", "fizzbuzz")
        records = store.read_logs(proc)
        assert len(records) == 1
        assert records[0].level == "REPORT"
        assert records[0].message == "fizzbuzz"

    def test_silent_node_empty(self, store):
        proc = store.create_process_node("work_chain")
        assert store.read_logs(proc) == []

    def test_emission_order(self, store):
        proc = store.create_process_node("work_chain")
        for i in range(5):
            store.append_log(proc, "REPORT", f"msg{i}")
        messages = [r.message for r in store.read_logs(proc)]
        assert messages == [f"msg{i}" for i in range(5)]

    def test_unknown_node(self, store):
        with pytest.raises(NotFoundError):
            store.append_log("nope", "REPORT", "x")

    def test_level_filter(self, store):
        proc = store.create_process_node("work_chain")
        store.append_log(proc, "REPORT", "keep")
        store.append_log(proc, "ERROR", "drop")
        assert [r.message for r in store.read_logs(proc, level="REPORT")] == ["keep"]


class TestCheckpoints:
    def test_latest_version_wins(self, store):
        proc = store.create_process_node("work_chain")
        store.save_checkpoint(proc, {"step": 1})
        store.save_checkpoint(proc, {"step": 2})
        assert store.load_checkpoint(proc) == {"step": 2}
        assert store.checkpoint_version(proc) == 2

    def test_survives_store_restart(self, store, tmp_path):
        proc = store.create_process_node("work_chain")
        payload = {"cursor": [[[], 3]], "ctx": {"n": 17}}
        store.save_checkpoint(proc, payload)
        reopened = Store(str(tmp_path / "store"))
        assert reopened.load_checkpoint(proc) == payload

    def test_missing_checkpoint(self, store):
        proc = store.create_process_node("work_chain")
        with pytest.raises(NotFoundError):
            store.load_checkpoint(proc)

    def test_delete(self, store):
        proc = store.create_process_node("work_chain")
        store.save_checkpoint(proc, {"x": 1})
        store.delete_checkpoint(proc)
        assert not store.has_checkpoint(proc)

    def test_only_process_nodes(self, store):
        data = store.create_data_node(Int(1))
        with pytest.raises(StoreError):
            store.save_checkpoint(data, {})

    def test_unsupported_schema_fails_loudly(self, store, tmp_path):
        proc = store.create_process_node("work_chain")
        store.save_checkpoint(proc, {"x": 1})
        path = store._checkpoint_path(proc)
        import json

        doc = json.load(open(path))
        doc["schema"] = 999
        json.dump(doc, open(path, "w"))
        reopened = Store(str(tmp_path / "store"))
        with pytest.raises(StoreError):
            reopened.load_checkpoint(proc)


class TestDurability:
    def test_partial_tmp_files_ignored(self, store, tmp_path):
        """A writer killed mid-commit leaves only tmp files; reopening is clean."""
        node = store.create_data_node(Int(1))
        seg_dir = str(tmp_path / "store" / "segments")
        with open(os.path.join(seg_dir, ".tmp-deadbeef"), "w") as fh:
            fh.write('[{"t": "node", "truncated')
        reopened = Store(str(tmp_path / "store"))
        assert reopened.node(node).attributes["value"] == 1
        assert len(reopened.nodes()) == 1

    def test_concurrent_writers_visible_after_refresh(self, tmp_path):
        a = Store(str(tmp_path / "store"))
        b = Store(str(tmp_path / "store"))
        node = a.create_data_node(Int(5))
        assert b.node(node).attributes["value"] == 5  # refresh picks it up

    def test_log_append_only_across_handles(self, tmp_path):
        a = Store(str(tmp_path / "store"))
        b = Store(str(tmp_path / "store"))
        proc = a.create_process_node("work_chain")
        a.append_log(proc, "REPORT", "one")
        b.append_log(proc, "REPORT", "two")
        assert [r.message for r in a.read_logs(proc)] == ["one", "two"]


class TestDotExport:
    def test_dot_round_trip_matches_topology(self, store):
        data = store.create_data_node(Int(3))
        calc = store.create_process_node("calc_function")
        out = store.create_data_node(Int(6))
        store.add_link(data, calc, "INPUT", "a")
        store.add_link(calc, out, "CREATE", "result")
        nodes, edges = parse_dot(store.to_dot())
        seqs = {store.node(n).seq: store.node(n).kind
                for n in (data, calc, out)}
        assert nodes == {f"{kind}:{seq}" for seq, kind in seqs.items()}
        data_label = f"data:{store.node(data).seq}"
        calc_label = f"calc_function:{store.node(calc).seq}"
        out_label = f"data:{store.node(out).seq}"
        assert (data_label, calc_label, "INPUT:a") in edges
        assert (calc_label, out_label, "CREATE:result") in edges

    def test_closure_export(self, store):
        a = store.create_data_node(Int(1))
        calc = store.create_process_node("calc_function")
        store.add_link(a, calc, "INPUT", "a")
        store.create_data_node(Int(99))  # disconnected
        nodes, _ = parse_dot(store.to_dot(calc))
        assert len(nodes) == 2
