"""Process specification: ports, namespaces, exit codes, validation, exposing."""

from __future__ import annotations

import itertools

import pytest

from flowd.spec import (
    ExitCode,
    Port,
    PortNamespace,
    ProcessSpec,
    SpecError,
    register_validator,
    validate,
)
from flowd.values import Bool, Float, Int, Str, Value


def is_positive(value, _full):
    if value.value <= 0:
        return "value must be positive"
    return None


class TestPortDeclaration:
    def test_input_port_with_default(self):
        spec = ProcessSpec()
        spec.input("a", valid_type=Int, default=Int(2), required=True)
        result = spec.inputs.validate({})
        assert result.valid
        assert result.resolved["a"].value == 2

    def test_output_port_declared(self):
        spec = ProcessSpec()
        spec.output("b", valid_type=Float, required=True)
        assert spec.outputs.get_port("b").valid_types == ("float",)

    def test_later_declaration_fully_overrides(self):
        spec = ProcessSpec()
        spec.input("a", valid_type=Int, default=Int(2), required=True,
                   validator=is_positive)
        spec.input("a", valid_type=Float, default=Float(3.0), required=False)
        port = spec.inputs.get_port("a")
        assert port.valid_types == ("float",)
        assert port.required is False
        assert port.validator is None
        result = spec.inputs.validate({})
        assert result.resolved["a"].value == 3.0
        # the old Int declaration must not be observable
        assert not spec.inputs.validate({"a": Float(1.5)}).errors
        assert spec.inputs.validate({"a": Int(1)}).errors

    def test_empty_path_is_declaration_error(self):
        spec = ProcessSpec()
        with pytest.raises(SpecError):
            spec.input("", valid_type=Int)

    def test_bad_key_is_declaration_error(self):
        spec = ProcessSpec()
        with pytest.raises(SpecError):
            spec.input("not-ok", valid_type=Int)
        with pytest.raises(SpecError):
            spec.input("a..b", valid_type=Int)

    def test_default_must_satisfy_valid_types(self):
        with pytest.raises(SpecError):
            Port(valid_type=Int, default=Str("nope"))

    def test_declaration_idempotence(self):
        one = ProcessSpec()
        one.input("a", valid_type=Int, default=Int(2))
        twice = ProcessSpec()
        twice.input("a", valid_type=Int, default=Int(2))
        twice.input("a", valid_type=Int, default=Int(2))
        assert twice.inputs.get_port("a").describe() == one.inputs.get_port("a").describe()


class TestNamespaces:
    def test_nested_namespace_depth_three(self):
        spec = ProcessSpec()
        spec.input_namespace("nested.input.namespace")
        ns = spec.inputs.get_port("nested")
        assert isinstance(ns, PortNamespace)
        inner = spec.inputs.get_port("nested.input.namespace")
        assert isinstance(inner, PortNamespace)

    def test_output_namespace(self):
        spec = ProcessSpec()
        spec.output_namespace("some.outputs")
        assert isinstance(spec.outputs.get_port("some.outputs"), PortNamespace)

    def test_dynamic_namespace_accepts_undeclared(self):
        spec = ProcessSpec()
        spec.input_namespace("x", dynamic=True)
        result = spec.inputs.validate({"x": {"anything": Int(1)}})
        assert result.valid
        assert result.resolved["x"]["anything"].value == 1

    def test_non_dynamic_rejects_undeclared(self):
        spec = ProcessSpec()
        spec.input_namespace("x")
        result = spec.inputs.validate({"x": {"surprise": Int(1)}})
        assert not result.valid

    def test_port_namespace_collision(self):
        spec = ProcessSpec()
        spec.input("a", valid_type=Int)
        with pytest.raises(SpecError):
            spec.input_namespace("a")
        with pytest.raises(SpecError):
            spec.input("a.b", valid_type=Int)

    def test_namespace_port_collision(self):
        spec = ProcessSpec()
        spec.input_namespace("ns")
        with pytest.raises(SpecError):
            spec.input("ns", valid_type=Int)

    def test_dynamic_namespace_type_constraint(self):
        spec = ProcessSpec()
        spec.input_namespace("x", dynamic=True)
        spec.inputs.get_port("x").valid_types = ("int",)
        assert spec.inputs.validate({"x": {"ok": Int(1)}}).valid
        assert not spec.inputs.validate({"x": {"bad": Str("s")}}).valid


class TestExitCodes:
    def test_register_and_lookup(self):
        spec = ProcessSpec()
        spec.exit_code(418, "ERROR_I_AM_A_TEAPOT",
                       "the process experienced an identity crisis")
        code = spec.get_exit_code("ERROR_I_AM_A_TEAPOT")
        assert code == ExitCode(418, "ERROR_I_AM_A_TEAPOT",
                                "the process experienced an identity crisis")

    def test_zero_status_reserved(self):
        spec = ProcessSpec()
        with pytest.raises(SpecError):
            spec.exit_code(0, "OK", "zero is reserved for success")

    def test_negative_status_rejected(self):
        spec = ProcessSpec()
        with pytest.raises(SpecError):
            spec.exit_code(-1, "NEGATIVE", "nope")

    def test_duplicate_label_rejected(self):
        spec = ProcessSpec()
        spec.exit_code(1, "ERR", "one")
        with pytest.raises(SpecError):
            spec.exit_code(2, "ERR", "two")

    def test_statuses_need_not_be_unique(self):
        spec = ProcessSpec()
        spec.exit_code(7, "ERR_A", "a")
        spec.exit_code(7, "ERR_B", "b")
        assert spec.get_exit_code("ERR_A").status == spec.get_exit_code("ERR_B").status


class TestValidation:
    def test_required_satisfied(self):
        ns = PortNamespace()
        ns.set_port("a", Port(valid_type=Int))
        result = ns.validate({"a": Int(5)})
        assert result.valid and result.resolved["a"].value == 5

    def test_default_fills(self):
        ns = PortNamespace()
        ns.set_port("a", Port(valid_type=Int, default=Int(2)))
        result = ns.validate({})
        assert result.valid and result.resolved["a"].value == 2

    def test_missing_required(self):
        ns = PortNamespace()
        ns.set_port("a", Port(valid_type=Int))
        result = ns.validate({})
        assert not result.valid

    def test_wrong_type(self):
        ns = PortNamespace()
        ns.set_port("a", Port(valid_type=Int))
        assert not ns.validate({"a": Str("x")}).valid

    def test_raw_values_wrapped(self):
        ns = PortNamespace()
        ns.set_port("a", Port(valid_type=Int))
        result = ns.validate({"a": 5})
        assert result.valid and isinstance(result.resolved["a"], Int)

    def test_custom_validator_message(self):
        ns = PortNamespace()
        ns.set_port("a", Port(valid_type=Int, validator=is_positive))
        result = ns.validate({"a": Int(-3)})
        assert not result.valid
        assert result.errors[0][1] == "value must be positive"

    def test_registered_validator_by_name(self):
        register_validator("spec_test_nonempty",
                           lambda v, _full: None if v.value else "must not be empty")
        ns = PortNamespace()
        ns.set_port("s", Port(valid_type=Str, validator="spec_test_nonempty"))
        assert ns.validate({"s": Str("x")}).valid
        assert not ns.validate({"s": Str("")}).valid

    def test_default_deep_copied(self):
        ns = PortNamespace()
        ns.set_port("d", Port(default={"k": [1, 2]}, required=False))
        first = ns.validate({}).resolved["d"]
        first.value["k"].append(3)
        second = ns.validate({}).resolved["d"]
        assert second.value == {"k": [1, 2]}


# -- exhaustive small-tree enumeration against a reference validator ----------

PORT_SHAPES = [
    {"valid_type": Int, "required": True},
    {"valid_type": Int, "default": Int(2)},
    {"valid_type": None, "required": False},
]
VALUE_CHOICES = [None, Int(1), Str("s")]  # None means "not supplied"


def reference_validate(tree: PortNamespace, values: dict):
    """Independent recursive reference for validity (not resolution)."""
    def check(ns: PortNamespace, supplied) -> bool:
        if not isinstance(supplied, dict):
            return False
        for key, child in ns.children.items():
            if isinstance(child, PortNamespace):
                if key in supplied:
                    if not check(child, supplied[key]):
                        return False
                elif child.required and not check(child, {}):
                    return False
                continue
            if key in supplied:
                value = supplied[key]
                if not isinstance(value, Value):
                    try:
                        from flowd.values import to_value
                        value = to_value(value)
                    except Exception:
                        return False
                if child.valid_types and value.tag not in child.valid_types:
                    return False
            elif child.default is None and child.required:
                return False
        for key in supplied:
            if key not in ns.children and not ns.dynamic:
                return False
        return True

    return check(tree, values or {})


def enumerate_trees():
    """Small port trees: depth <= 3, <= 3 children per namespace."""
    trees = []
    for shapes in itertools.product(range(len(PORT_SHAPES)), repeat=2):
        for dynamic in (False, True):
            root = PortNamespace(dynamic=dynamic)
            root.set_port("a", Port(**PORT_SHAPES[shapes[0]]))
            sub = PortNamespace(dynamic=not dynamic)
            sub.set_port("b", Port(**PORT_SHAPES[shapes[1]]))
            deep = PortNamespace()
            deep.set_port("c", Port(valid_type=Int, default=Int(9)))
            sub.set_port("deep", deep)
            root.set_port("ns", sub)
            trees.append(root)
    return trees


def enumerate_value_sets():
    sets = []
    for a, b, extra in itertools.product(VALUE_CHOICES, VALUE_CHOICES, (False, True)):
        values: dict = {}
        if a is not None:
            values["a"] = a
        inner: dict = {}
        if b is not None:
            inner["b"] = b
        if extra:
            inner["undeclared"] = Int(7)
        if inner:
            values["ns"] = inner
        sets.append(values)
    return sets


def test_exhaustive_small_trees_match_reference():
    """Acceptance: engine validity equals the recursive reference on all cases."""
    cases = 0
    for tree in enumerate_trees():
        for values in enumerate_value_sets():
            expected = reference_validate(tree, values)
            actual = tree.validate(values).valid
            assert actual == expected, (tree.describe(), values)
            cases += 1
    assert cases >= 3 ** 3


class TestExpose:
    def _child_spec(self):
        spec = ProcessSpec(name="child")
        spec.input("a", valid_type=Int)
        spec.input("b", valid_type=Str, default=Str("hi"), required=False)
        return spec

    def test_expose_copies_all_ports(self):
        child = self._child_spec()
        parent = ProcessSpec(name="parent")
        parent.expose_inputs(child)
        assert parent.inputs.has_port("a")
        assert parent.inputs.has_port("b")

    def test_expose_into_namespace_and_extract(self):
        child = self._child_spec()
        parent = ProcessSpec(name="parent")
        parent.expose_inputs(child, namespace="child")
        resolved = parent.inputs.validate({"child": {"a": Int(3)}}).resolved
        extracted = parent.exposed_inputs(resolved, child, namespace="child")
        assert extracted["a"].value == 3
        assert extracted["b"].value == "hi"

    def test_exclude_everything(self):
        child = ProcessSpec(name="child")
        child.input("a", valid_type=Int)
        parent = ProcessSpec(name="parent")
        parent.expose_inputs(child, exclude=["a"])
        assert not parent.inputs.has_port("a")

    def test_include_exclude_mutually_exclusive(self):
        child = self._child_spec()
        parent = ProcessSpec(name="parent")
        with pytest.raises(SpecError):
            parent.expose_inputs(child, include=["a"], exclude=["b"])

    def test_expose_is_a_deep_copy(self):
        child = self._child_spec()
        parent = ProcessSpec(name="parent")
        parent.expose_inputs(child)
        parent.inputs.get_port("a").valid_types = ("str",)
        assert child.inputs.get_port("a").valid_types == ("int",)

    def test_round_trip_reproduces_inputs(self):
        child = self._child_spec()
        for inputs in ({"a": Int(1)}, {"a": Int(2), "b": Str("x")}):
            direct = child.inputs.validate(inputs).resolved
            parent = ProcessSpec(name="parent")
            parent.expose_inputs(child, namespace="sub")
            resolved = parent.inputs.validate({"sub": inputs}).resolved
            extracted = parent.exposed_inputs(resolved, child, namespace="sub")
            assert {k: v.value for k, v in extracted.items()} == \
                {k: v.value for k, v in direct.items()}


def test_spec_text_export_is_stable():
    spec = ProcessSpec(name="demo")
    spec.input("a", valid_type=Int, default=Int(2))
    spec.exit_code(418, "ERROR_I_AM_A_TEAPOT", "identity crisis")
    first = spec.to_text()
    assert first == spec.to_text()
    assert '"ERROR_I_AM_A_TEAPOT"' in first
    assert first.index('"inputs"') < first.index('"outputs"')  # sorted keys


def test_validate_free_function():
    ns = PortNamespace()
    ns.set_port("a", Port(valid_type=Bool))
    assert validate(ns, {"a": Bool(True)}).valid
