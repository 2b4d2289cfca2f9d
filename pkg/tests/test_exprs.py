import pytest
from hypothesis import given, strategies as st

from flowline.exprs import BadExpression, eval_predicate, parse_expression, render_input


def ev(text, event):
    return parse_expression(text).evaluate(event)


class TestParse:
    def test_suffix_predicate_parses(self):
        expr = parse_expression('filename.endswith(".tiff")')
        assert eval_predicate(expr, {"filename": "a.tiff"}) is True

    def test_len_template_parses(self):
        expr = parse_expression("len(files)")
        assert expr.evaluate({"files": ["a", "b"]}) == 2

    def test_unbalanced_parens(self):
        with pytest.raises(BadExpression) as err:
            parse_expression("(a or b")
        assert err.value.position >= 0

    def test_unknown_method(self):
        with pytest.raises(BadExpression):
            parse_expression("x.explode()")

    def test_trailing_junk(self):
        with pytest.raises(BadExpression):
            parse_expression("a == 1 b")

    def test_empty(self):
        with pytest.raises(BadExpression):
            parse_expression("   ")


class TestEval:
    def test_suffix_match(self):
        expr = parse_expression('filename.endswith(".tiff")')
        assert eval_predicate(expr, {"filename": "a.tiff"}) is True
        assert eval_predicate(expr, {"filename": "a.h5"}) is False

    def test_missing_property_is_false(self):
        expr = parse_expression('filename.endswith(".tiff")')
        assert eval_predicate(expr, {"other": 1}) is False

    def test_null_comparisons_false(self):
        for text in ("missing == 1", "missing != 1", "missing < 1", "missing == null",
                     "1 == missing", "null == null"):
            assert ev(text, {}) is False, text

    def test_comparisons(self):
        event = {"n": 5, "s": "abc", "b": True}
        assert ev("n == 5", event) is True
        assert ev("n != 4", event) is True
        assert ev("n > 4 and n < 6", event) is True
        assert ev("n >= 5 and n <= 5", event) is True
        assert ev('s == "abc"', event) is True
        assert ev('s < "abd"', event) is True
        assert ev("b == true", event) is True
        assert ev("b == 1", event) is False  # booleans are not numbers

    def test_boolean_logic(self):
        assert ev("true and not false", {}) is True
        assert ev("false or false", {}) is False
        assert ev("not missing", {}) is True

    def test_member_and_index(self):
        event = {"meta": {"run": "r1"}, "files": ["x", "y"], "event": None}
        assert ev("meta.run", event) == "r1"
        assert ev("files[1]", event) == "y"
        assert ev("files[9]", event) is None
        assert ev('meta["run"]', event) == "r1"

    def test_event_names_whole_document(self):
        event = {"meta": {"run": "r1"}}
        assert ev("event.meta.run", event) == "r1"

    def test_event_property_shadows_reserved_name(self):
        assert ev("event", {"event": "boom"}) == "boom"

    def test_string_methods(self):
        event = {"name": "sample_42.tiff"}
        assert ev('name.startswith("sample")', event) is True
        assert ev('name.contains("_42")', event) is True
        assert ev('name.contains("zz")', event) is False

    def test_methods_on_non_strings_yield_null(self):
        assert ev('n.endswith("x")', {"n": 5}) is None

    def test_len(self):
        assert ev("len(files)", {"files": [1, 2, 3]}) == 3
        assert ev('len("abcd")', {}) == 4
        assert ev("len(obj)", {"obj": {"a": 1}}) == 1
        assert ev("len(missing)", {}) is None

    def test_numbers(self):
        assert ev("n == 1.5", {"n": 1.5}) is True
        assert ev("n > 1", {"n": 1.5}) is True


events = st.recursive(
    st.one_of(st.none(), st.booleans(), st.integers(min_value=-99, max_value=99),
              st.floats(allow_nan=False, allow_infinity=False, width=16),
              st.text(max_size=6)),
    lambda inner: st.one_of(
        st.lists(inner, max_size=4),
        st.dictionaries(st.sampled_from(["filename", "files", "meta", "n", "s", "event"]),
                        inner, max_size=4)),
    max_leaves=16)

PREDICATES = [
    'filename.endswith(".tiff")',
    "len(files) > 0",
    "n == 1 or s == 'x'",
    "not (meta.run == 'a' and n < 3)",
    "files[0] != null",
    "event.meta.run >= 's'",
    "len(filename) <= 12",
]


@given(event=events, text=st.sampled_from(PREDICATES))
def test_predicate_totality(event, text):
    """Predicates never raise over fuzzed documents (depth <= 4)."""
    expr = parse_expression(text)
    verdict = eval_predicate(expr, event)
    assert isinstance(verdict, bool)
    assert eval_predicate(expr, event) is verdict  # deterministic


class TestRenderInput:
    def test_len_example(self):
        template = {"number_of_files": parse_expression("len(files)")}
        assert render_input(template, {"files": ["a", "b"]}) == {"number_of_files": 2}

    def test_empty_template(self):
        assert render_input({}, {"anything": 1}) == {}

    def test_nested_access(self):
        template = {"run": parse_expression("event.meta.run")}
        assert render_input(template, {"meta": {"run": "r7"}}) == {"run": "r7"}

    def test_absent_renders_null(self):
        template = {"x": parse_expression("nothing.here")}
        assert render_input(template, {}) == {"x": None}
