import numpy as np
import pytest
from hypothesis import given, strategies as st

from torquemux import kvdoc


SAMPLE = """\
# comment
alpha: 1 2 3
block:
  name: hello   # trailing comment
  nested:
    flag: on
  count: 4
beta: -1.5e-3
"""


def test_parse_basics():
    doc = kvdoc.parse(SAMPLE)
    v = kvdoc.View(doc)
    assert v.floats("alpha", 3) == [1.0, 2.0, 3.0]
    block = v.section("block")
    assert block.str("name") == "hello"
    assert block.section("nested").flag("flag") is True
    assert block.int("count") == 4
    assert v.float("beta") == pytest.approx(-1.5e-3)


def test_entry_lines_are_recorded():
    doc = kvdoc.parse(SAMPLE)
    assert doc.entries["alpha"].line == 2
    assert doc.entries["block"].section.entries["count"].line == 7


def test_duplicate_key_rejected():
    with pytest.raises(kvdoc.DocError, match="line 2: duplicate key 'a'"):
        kvdoc.parse("a: 1\na: 2")


def test_tab_indentation_rejected():
    with pytest.raises(kvdoc.DocError, match="line 2: tabs"):
        kvdoc.parse("a:\n\tb: 1")


def test_ragged_indent_rejected():
    with pytest.raises(kvdoc.DocError, match="line 3"):
        kvdoc.parse("a:\n    b: 1\n  c: 2")


def test_missing_colon_rejected():
    with pytest.raises(kvdoc.DocError, match="line 1"):
        kvdoc.parse("just some words")


def test_unknown_key_reported_with_line():
    doc = kvdoc.parse("a: 1\nmystery: 2\n")
    v = kvdoc.View(doc)
    v.float("a")
    with pytest.raises(kvdoc.DocError, match="line 2: unknown key 'mystery'"):
        v.finish()


def test_missing_required_key():
    v = kvdoc.View(kvdoc.parse("a: 1"))
    with pytest.raises(kvdoc.DocError, match="missing required key 'b'"):
        v.float("b")


def test_wrong_arity_reported():
    v = kvdoc.View(kvdoc.parse("vec: 1 2"))
    with pytest.raises(kvdoc.DocError, match="expects 3 values, got 2"):
        v.floats("vec", 3)


def test_non_number_reported():
    v = kvdoc.View(kvdoc.parse("x: banana"))
    with pytest.raises(kvdoc.DocError, match="line 1.*not a number"):
        v.float("x")


def test_section_vs_scalar_mismatch():
    v = kvdoc.View(kvdoc.parse("x: 1"))
    with pytest.raises(kvdoc.DocError, match="must be a section"):
        v.section("x")


def test_emit_parse_round_trip():
    data = {"top": {"a": [1.0, 2.5], "flag": True, "name": "run-3"},
            "count": 7}
    doc = kvdoc.parse(kvdoc.emit(data))
    v = kvdoc.View(doc)
    top = v.section("top")
    assert top.floats("a", 2) == [1.0, 2.5]
    assert top.flag("flag") is True
    assert top.str("name") == "run-3"
    assert v.int("count") == 7


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_format_round_trips_exactly(x):
    text = kvdoc.emit({"x": x})
    v = kvdoc.View(kvdoc.parse(text))
    got = v.float("x")
    assert got == x or (np.isnan(got) and np.isnan(x))
