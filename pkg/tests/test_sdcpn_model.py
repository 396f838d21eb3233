import numpy as np
import pytest

from stochhybrid.functions import (AffineDrift, ArcLayout, BoxGuard, ConstantRate, FiringMeasure,
                                   FixedColour, ZeroDrift, zero_diffusion)
from stochhybrid.model_io import airtraffic_example
from stochhybrid.sdcpn_model import (Arc, InitialMarking, Place, SdcpnModel, Transition, check_d1,
                                     d1_passes, validate)

import crafted


def _codes(model):
    return {v.code for v in validate(model)}


def _small(**over):
    kw = dict(
        places=[Place("A", 1, ZeroDrift(1), zero_diffusion(1, 1), 1), Place("B")],
        transitions=[Transition("T", "delay", delay_rate=ConstantRate(1.0))],
        arcs=[Arc("a1", "ordinary", "A", "T"), Arc("a2", "ordinary", "T", "A")],
        initial=InitialMarking({"A": 1}, {"A": [FixedColour([0.0])]}),
    )
    kw.update(over)
    return SdcpnModel(**kw)


def test_example_is_valid():
    m = airtraffic_example()
    assert validate(m) == []
    assert m.initial_counts() == (1, 0, 0, 1, 0, 1, 0)
    assert m.mode_name((0, 1, 1, 0, 0, 1, 0)) == "V2"
    assert m.mode_name((9,) * 7) is None


def test_small_net_is_valid():
    assert validate(_small()) == []


@pytest.mark.parametrize("over, code", [
    (dict(arcs=[Arc("a1", "ordinary", "A", "T"), Arc("a1", "ordinary", "T", "A")]), "duplicate id"),
    (dict(arcs=[Arc("a1", "ordinary", "A", "B"), Arc("a2", "ordinary", "A", "T")]), "not bipartite"),
    (dict(arcs=[Arc("a1", "ordinary", "A", "T"), Arc("a2", "inhibitor", "T", "B")]),
     "inhibitor arc direction"),
    (dict(arcs=[Arc("a1", "ordinary", "A", "T"), Arc("a2", "enabling", "T", "B")]),
     "enabling arc direction"),
    (dict(arcs=[Arc("a1", "ordinary", "A", "T"), Arc("a2", "ordinary", "T", "Q")]), "unknown node"),
    (dict(arcs=[Arc("a1", "bogus", "A", "T"), Arc("a2", "ordinary", "T", "A")]), "arc kind"),
    (dict(arcs=[Arc("a2", "ordinary", "T", "A")]), "pre-enabling impossible"),
    (dict(transitions=[Transition("T", "delay")]), "transition kind"),
    (dict(transitions=[Transition("T", "guard", guard=BoxGuard([0, 0], [1, 1]))]), "colour dimension"),
    (dict(transitions=[Transition("T", "teleport")]), "transition kind"),
    (dict(places=[Place("A", 1, ZeroDrift(1), zero_diffusion(1, 1), 1), Place("B", 0, ZeroDrift(1))]),
     "colour dimension"),
    (dict(places=[Place("A", 1, AffineDrift(np.eye(2)), zero_diffusion(1, 1), 1), Place("B")]),
     "colour dimension"),
    (dict(places=[Place("A", 1, ZeroDrift(1), zero_diffusion(1, 2), 1), Place("B")]), "colour dimension"),
    (dict(places=[Place("A", 1), Place("B")]), "colour dimension"),
    (dict(initial=InitialMarking({"A": -1})), "initial marking"),
    (dict(initial=InitialMarking({"Z": 1})), "initial marking"),
    (dict(initial=InitialMarking({"A": 1})), "initial marking"),
    (dict(modes={"V": (1,)}), "mode name"),
])
def test_structural_violations(over, code):
    assert code in _codes(_small(**over))


def test_firing_measure_support_must_be_binary():
    bad = FiringMeasure(sampler=lambda c, u: ((2,), c), support=((2,),))
    assert "firing measure" in _codes(_small(transitions=[
        Transition("T", "delay", delay_rate=ConstantRate(1.0), firing=bad)]))


def test_unbindable_firing_is_reported():
    # copying a 1-d colour into a place with a 2-d colour cannot work
    m = _small(places=[Place("A", 1, ZeroDrift(1), zero_diffusion(1, 1), 1), Place("B")],
               arcs=[Arc("a1", "ordinary", "B", "T"), Arc("a2", "ordinary", "T", "A")],
               transitions=[Transition("T", "delay", delay_rate=ConstantRate(1.0))])
    assert "firing measure" in _codes(m)


def test_layout():
    m = airtraffic_example()
    s = m.arcs_of("T1a")
    assert s.layout == ArcLayout((6, 0), ("ordinary", "enabling"), (6,))
    assert s.consumed == (0,)


def test_initial_sampling_shapes():
    m = airtraffic_example()
    cols = m.initial.sample(m, np.random.default_rng(0))
    np.testing.assert_array_equal(cols["P1"][0], [0, 0, 1, 1, 0, 0.15])
    assert cols["P3"] == []


def test_d1_passes_on_example():
    rep = check_d1(airtraffic_example(), 100_000, rng=np.random.default_rng(0))
    assert set(rep) == {"P1", "P2", "P7"}
    assert d1_passes(rep)


def test_d1_flags_quadratic_drift():
    rep = check_d1(crafted.d1_square_drift(), 20_000, rng=np.random.default_rng(0))
    assert not d1_passes(rep)
    assert rep["P"].growth_unbounded
