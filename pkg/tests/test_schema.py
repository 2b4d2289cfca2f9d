import copy

import pytest
from hypothesis import given, strategies as st

from flowline.schema import SchemaError, parse_schema, validate_input

FIG_FORM_SCHEMA = {
    "type": "object",
    "properties": {
        "payload": {"type": "object", "title": "Payload"},
        "endpoint_compute": {"type": "string", "title": "Compute endpoint id"},
        "validate_function_id": {"type": "string", "title": "Function id"},
        "tags": {"type": "array", "title": "Tags"},
        "label": {"type": "string", "title": "Label"},
    },
    "required": ["payload", "endpoint_compute", "validate_function_id"],
}


class TestParseSchema:
    def test_empty_schema_ok(self):
        assert parse_schema({}).document == {}
        assert parse_schema(None).document == {}

    def test_required_must_be_declared(self):
        with pytest.raises(SchemaError):
            parse_schema({"properties": {"a": {"type": "string"}}, "required": ["b"]})

    def test_unknown_type_rejected(self):
        with pytest.raises(SchemaError):
            parse_schema({"type": "decimal"})

    def test_unknown_keyword_rejected(self):
        with pytest.raises(SchemaError):
            parse_schema({"properties": {"a": {"oneOf": []}}})

    def test_nested_subschemas_checked(self):
        with pytest.raises(SchemaError):
            parse_schema({"properties": {"a": {"type": "object",
                                               "properties": {"b": {"type": "nope"}}}}})


class TestValidate:
    def test_missing_required_reported_with_path(self):
        result = validate_input(FIG_FORM_SCHEMA, {"payload": {}, "endpoint_compute": "ep"})
        assert not result.ok
        assert [v.path for v in result.violations] == ["$.validate_function_id"]

    def test_vacuous_schema_accepts_anything(self):
        for doc in ({}, {"x": 1}, [1, 2], "str", None):
            assert validate_input({}, doc).ok

    def test_defaults_applied(self):
        schema = {"type": "object", "properties": {"n": {"type": "integer", "default": 5}}}
        result = validate_input(schema, {})
        assert result.ok and result.value == {"n": 5}

    def test_type_mismatches(self):
        schema = {"type": "object", "properties": {
            "s": {"type": "string"}, "i": {"type": "integer"}, "n": {"type": "number"},
            "b": {"type": "boolean"}, "o": {"type": "object"}, "a": {"type": "array"}}}
        result = validate_input(schema, {"s": 1, "i": "x", "n": True, "b": 0, "o": [], "a": {}})
        assert {v.path for v in result.violations} == {"$.s", "$.i", "$.n", "$.b", "$.o", "$.a"}

    def test_bool_is_not_integer(self):
        schema = {"type": "object", "properties": {"i": {"type": "integer"}}}
        assert not validate_input(schema, {"i": True}).ok

    def test_enum(self):
        schema = {"type": "object", "properties": {"c": {"type": "string", "enum": ["a", "b"]}}}
        assert validate_input(schema, {"c": "a"}).ok
        result = validate_input(schema, {"c": "z"})
        assert [v.path for v in result.violations] == ["$.c"]

    def test_nested_object_defaults(self):
        schema = {"type": "object", "properties": {
            "opts": {"type": "object", "properties": {"retries": {"type": "integer", "default": 3}}}}}
        result = validate_input(schema, {})
        assert result.ok and result.value == {"opts": {"retries": 3}}

    def test_input_not_mutated(self):
        schema = {"type": "object", "properties": {"n": {"type": "integer", "default": 5}}}
        original = {}
        validate_input(schema, original)
        assert original == {}

    def test_violation_inside_nested_object(self):
        schema = {"type": "object", "properties": {
            "meta": {"type": "object", "properties": {"run": {"type": "string"}},
                     "required": ["run"]}}}
        result = validate_input(schema, {"meta": {}})
        assert [v.path for v in result.violations] == ["$.meta.run"]

    @given(st.dictionaries(st.sampled_from(["payload", "endpoint_compute", "validate_function_id",
                                            "tags", "label"]),
                           st.one_of(st.text(max_size=4), st.integers(),
                                     st.dictionaries(st.text(max_size=2), st.integers(), max_size=2),
                                     st.lists(st.integers(), max_size=2)),
                           max_size=5))
    def test_idempotent(self, doc):
        """Validating the augmented output changes nothing further."""
        first = validate_input(FIG_FORM_SCHEMA, doc)
        second = validate_input(FIG_FORM_SCHEMA, copy.deepcopy(first.value))
        assert second.value == first.value
        assert [str(v) for v in second.violations] == [str(v) for v in first.violations]
