from fractions import Fraction

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from stochhybrid.model_io import (ParseError, airtraffic_document, airtraffic_example, builtin_names, format_value,
                                  load, parse, parse_document, parse_value, serialize)
from stochhybrid.sdcpn_model import validate

from crafted import NETS


def _t(model, tid):
    return model.transitions[model.transition_index[tid]]


def test_builtin_example_structure():
    model = airtraffic_example()
    assert len(model.places) == 7 and len(model.transitions) == 9
    kinds = {}
    for t in model.transitions:
        kinds.setdefault(t.kind, set()).add(t.id)
    assert kinds == {"guard": {"T7", "T8"}, "delay": {"T3", "T4", "T5", "T6"},
                     "immediate": {"T1a", "T1b", "T2"}}
    assert model.dims == (6, 6, 0, 0, 0, 0, 6)
    assert model.initial_counts() == (1, 0, 0, 1, 0, 1, 0)
    assert validate(model) == []
    assert "airtraffic" in builtin_names()


def test_landing_guard_is_positive_altitude_and_descent():
    g = _t(airtraffic_example(), "T7").guard
    inside = np.array([[5.0, -3.0, 0.5, 1.0, 2.0, 0.1]])
    assert g.distance(inside)[0] < 0
    for k in (2, 5):
        out = inside.copy()
        out[0, k] = -0.1
        assert g.distance(out)[0] > 0


@pytest.mark.parametrize("text, fragment, line", [
    ("", "no places", None),
    ("[places]\nA\n[arcs]\nA -> T9 : ordinary\n", "T9", 4),
    ("[places]\nA\n[bogus]\n", "unknown section", 3),
    ("[places]\nA\n[transitions]\nT : delay rate=nosuch(1)\n[arcs]\nA -> T\n", "nosuch", 4),
    ("[places]\nA : colour=2 drift=linear([[1]])\n", "dimension", 2),
    ("[places]\nA : colour=x\n", "natural", 2),
    ("[places]\nA\n[transitions]\nT : sometimes\n", "kind", 4),
    ("format = 7\n[places]\nA\n", "version", 1),
    ("[params]\nk = [1, [2]]\n[places]\nA\n", "array", 2),
])
def test_parse_errors(text, fragment, line):
    with pytest.raises(ParseError) as info:
        parse(text)
    assert fragment in str(info.value)
    assert info.value.line == line


def test_error_column_points_at_the_attribute():
    with pytest.raises(ParseError) as info:
        parse_document("[places]\nA : colour=1 colr=2\n")
    assert (info.value.line, info.value.column) == (2, 14)


@pytest.mark.parametrize("text, want", [
    ("3", 3), ("3/2", Fraction(3, 2)), ("-0.25", -0.25), ("1e-3", 1e-3), ("inf", float("inf")),
    ("sym:delta", sympy.Symbol("delta", positive=True)),
])
def test_parse_value(text, want):
    assert parse_value(text) == want


def test_parse_array_literal_with_inf_and_rationals():
    np.testing.assert_array_equal(parse_value("[-inf, 1/2, 3]"), [-np.inf, 0.5, 3.0])


values = st.one_of(
    st.integers(-10**6, 10**6),
    st.fractions(max_denominator=1000).filter(lambda f: f.denominator != 1),
    st.floats(allow_nan=False, width=64),
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=4).map(np.array),
)


@settings(max_examples=200)
@given(values)
def test_value_round_trip(v):
    back = parse_value(format_value(v))
    if isinstance(v, np.ndarray):
        np.testing.assert_array_equal(back, v)
    else:
        assert back == v


@pytest.mark.parametrize("name", sorted(p.stem for p in NETS.glob("*.sdcpn")) + ["airtraffic"])
def test_serialize_round_trip_keeps_hash(name):
    text = airtraffic_document() if name == "airtraffic" else parse_document((NETS / f"{name}.sdcpn").read_text())
    text = serialize(text)
    once = parse(text)
    twice = parse(serialize(once))
    assert serialize(twice) == serialize(once)
    assert once.source_hash == twice.source_hash


ids = st.sampled_from(["A", "B", "C", "D"])


@st.composite
def small_nets(draw):
    n_places = draw(st.integers(1, 4))
    places = ["A", "B", "C", "D"][:n_places]
    lines = ["format = 1", "name = rnd", "[params]", f"r = {draw(st.integers(1, 9))}", "[places]"]
    lines += places
    n_trans = draw(st.integers(0, 3))
    trans = [f"T{i}" for i in range(n_trans)]
    if trans:
        lines.append("[transitions]")
        for t in trans:
            lines.append(f"{t} : " + draw(st.sampled_from(["immediate", "delay rate=const(r)",
                                                           "delay rate=const(1/3)"])))
        lines.append("[arcs]")
        for t in trans:
            lines.append(f"{draw(st.sampled_from(places))} -> {t} : "
                         + draw(st.sampled_from(["ordinary", "enabling", "inhibitor"])))
            lines.append(f"{t} -> {draw(st.sampled_from(places))}")
    lines.append("[initial]")
    lines.append(f"{places[0]} : {draw(st.integers(0, 3))}")
    return "\n".join(lines) + "\n"


@settings(max_examples=100, deadline=None)
@given(small_nets())
def test_random_documents_round_trip(text):
    doc = parse_document(text)
    again = parse_document(serialize(doc))
    assert serialize(again) == serialize(doc)
    assert again.hash() == doc.hash()


def test_param_override_changes_hash_and_rates():
    base = load("builtin:airtraffic")
    fast = load("builtin:airtraffic", delta4=5)
    assert base.source_hash != fast.source_hash
    assert _t(fast, "T4").delay_rate.value == 5
    with pytest.raises(ParseError, match="unknown parameter"):
        load("builtin:airtraffic", delta9=1)


def test_example_argument_checks():
    with pytest.raises(ParseError, match="X0"):
        airtraffic_example(X0=[0, 0, -1, 0, 0, 0])
    with pytest.raises(ParseError, match="delta3"):
        airtraffic_example(delta3=0)


def test_equal_rates_give_equal_jump_rates():
    from stochhybrid.gshs import map_sdcpn_to_gshs
    model = map_sdcpn_to_gshs(airtraffic_example(3, 3, 3, 3))
    assert all(r.value == 6 for r in model.rates)


def test_no_landing_variant_never_hits_guards():
    model = airtraffic_example(landing=False)
    g = _t(model, "T7").guard
    assert np.all(g.distance(np.array([[0, 0, -5, 0, 0, -5.0]])) < 0)
