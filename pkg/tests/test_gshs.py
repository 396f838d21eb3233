import json
from fractions import Fraction

import numpy as np
import pytest
import sympy

from stochhybrid.core import RandomBasis, SolverParams
from stochhybrid.gshs import (MappingError, ReachabilityError, check_g1_g4, gshs_description_from_json,
                              gshs_to_json, is_one, map_sdcpn_to_gshs, reachability_graph,
                              simulate_gshs, simulate_gshs_batch)
from stochhybrid.model_io import airtraffic_example

import crafted
from crafted import net
from example_tables import (DEFAULTS, LAMBDA, MODE_VECTORS, NAMES, TABLE_BOUNDARY, TABLE_SPONTANEOUS, d4,
                            d6)


@pytest.fixture(scope="module")
def symbolic():
    return map_sdcpn_to_gshs(airtraffic_example(symbolic=True))


@pytest.fixture(scope="module")
def numeric():
    return map_sdcpn_to_gshs(airtraffic_example())


def _entry(model, kind, src, dst):
    rows = model.kernel.spontaneous if kind == "spontaneous" else model.kernel.boundary
    row = rows[model.mode_index(src)]
    return 0 if row is None else row[model.mode_index(dst)]


def test_mode_set_and_initial_mode(numeric):
    assert [m.name for m in numeric.modes] == NAMES
    assert {m.name: m.marking for m in numeric.modes} == MODE_VECTORS
    th, X = numeric.init_batch(np.random.default_rng(0), 3)
    assert list(th) == [0, 0, 0]
    np.testing.assert_array_equal(X[0], [0, 0, 1, 1, 0, 0.15])


def test_mode_fields_follow_the_flight_phase(numeric):
    assert numeric.dims == [6] * 8
    for k, name in enumerate(NAMES):
        zero = numeric.f[k].is_zero and numeric.g[k].is_zero
        assert zero == (name in ("V5", "V6", "V7", "V8"))
        assert (numeric.domains[k] is None) == zero


@pytest.mark.parametrize("src, dst", [(s, d) for s in NAMES for d in NAMES])
def test_spontaneous_kernel_symbolic(symbolic, src, dst):
    want = TABLE_SPONTANEOUS.get((src, dst), 0)
    assert sympy.simplify(_entry(symbolic, "spontaneous", src, dst) - want) == 0


@pytest.mark.parametrize("src, dst", [(s, d) for s in NAMES[:4] for d in NAMES])
def test_boundary_kernel(symbolic, src, dst):
    assert _entry(symbolic, "boundary", src, dst) == TABLE_BOUNDARY.get((src, dst), 0)


def test_landed_modes_have_no_boundary_row(symbolic):
    for name in NAMES[4:]:
        assert symbolic.kernel.boundary[symbolic.mode_index(name)] is None


def test_numeric_kernel_is_exact_rational(numeric):
    for (src, dst), expr in TABLE_SPONTANEOUS.items():
        got = _entry(numeric, "spontaneous", src, dst)
        assert isinstance(got, Fraction)
        assert got == Fraction(str(expr.subs(DEFAULTS)))
    assert _entry(numeric, "spontaneous", "V1", "V2") == Fraction(2, 3)


@pytest.mark.parametrize("name", NAMES)
def test_jump_rates(symbolic, numeric, name):
    k = symbolic.mode_index(name)
    assert sympy.simplify(symbolic.rates[k].value - LAMBDA[name]) == 0
    assert numeric.rates[k].value == Fraction(str(LAMBDA[name].subs(DEFAULTS)))


def test_rows_sum_to_one(symbolic, numeric):
    for model in (symbolic, numeric):
        sums = model.kernel.row_sums()
        assert all(is_one(s) for s in sums["spontaneous"])
        assert all(s is None or is_one(s) for s in sums["boundary"])


def test_kernel_sampling_frequencies(numeric):
    rng = np.random.default_rng(3)
    th, _ = numeric.kernel.sample_batch(np.zeros(30_000, dtype=int), np.zeros((30_000, 6)), False, rng)
    freq = np.bincount(th, minlength=8) / len(th)
    assert freq[1] == pytest.approx(2 / 3, abs=0.01)
    assert freq[3] == pytest.approx(1 / 3, abs=0.01)


def test_monte_carlo_sampler_agrees_with_exact_rows(numeric):
    rng = np.random.default_rng(4)
    x = np.array([0, 0, 1, 1, 0, 0.15])
    hits = np.zeros(8)
    for _ in range(3000):
        k, _ = numeric.kernel.sampler(numeric.mode_index("V3"), x, False, rng)
        hits[k] += 1
    assert hits[numeric.mode_index("V4")] / 3000 == pytest.approx(4 / 7, abs=0.03)
    k, y = numeric.kernel.sampler(0, x, True, rng)
    assert k == numeric.mode_index("V5")
    np.testing.assert_array_equal(y, x)


def test_reachability_graph_of_example():
    g = reachability_graph(airtraffic_example())
    assert len(g.nodes) == 12
    assert g.nodes[g.initial] == (1, 0, 0, 1, 0, 1, 0)
    assert {t for _, t, _ in g.successors(g.initial)} == {"T4", "T6", "T7"}


def test_unbounded_net_hits_node_budget():
    with pytest.raises(ReachabilityError, match="budget"):
        map_sdcpn_to_gshs(net("producer"), max_nodes=100)


def test_immediate_cycle_has_no_mode():
    with pytest.raises(MappingError, match="immediate"):
        map_sdcpn_to_gshs(net("immediate_cycle"))


def test_single_place_without_transitions():
    model = map_sdcpn_to_gshs(net("ou_single"))
    assert len(model.modes) == 1
    assert model.rates[0].value == 0
    assert model.kernel.spontaneous == [[Fraction(1)]]


def test_colour_changing_firing_uses_monte_carlo_kernel():
    model = map_sdcpn_to_gshs(net("colour_shift"))
    assert not model.metadata["exact_kernel"]
    k, x = model.kernel.sample(0, np.array([2.0]), False, np.random.default_rng(0))
    assert k == 0 and x[0] == 3.0


def test_json_export_round_trip(symbolic, numeric):
    doc = gshs_description_from_json(gshs_to_json(numeric))
    assert doc["spontaneous"][0][1] == Fraction(2, 3)
    assert doc["lambda"][0] == Fraction(3, 2)
    assert [m["name"] for m in doc["modes"]] == NAMES
    sdoc = gshs_description_from_json(gshs_to_json(symbolic))
    assert sympy.simplify(sdoc["spontaneous"][0][1] - d4 / (d4 + d6)) == 0
    with pytest.raises(ValueError):
        gshs_description_from_json(json.dumps({"kind": "hsde"}))


def test_single_path_is_cadlag(numeric):
    path = simulate_gshs(numeric, 5.0, SolverParams(dt=1e-3), seed=2)
    assert path.check_cadlag() == []
    assert path.n_jumps > 0
    for k, t in enumerate(path.jump_times[1:], start=1):
        before, after = path.segments[k - 1].mode, path.segments[k].mode
        np.testing.assert_array_equal(path.left_limit(t), path.value_at(t))  # psi = 0: x kept
        if before.name in ("V1", "V2", "V3", "V4") and after.name in ("V5", "V6", "V7", "V8"):
            x = path.value_at(t)
            assert min(x[2], x[5]) == pytest.approx(0.0, abs=1e-6)


def test_batch_reproducible(numeric):
    kw = dict(horizon=2.0, params=SolverParams(dt=1e-2), reps=30, grid_step=1.0)
    a = simulate_gshs_batch(numeric, basis=RandomBasis(1), **kw)
    b = simulate_gshs_batch(numeric, basis=RandomBasis(1), **kw)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.modes, b.modes)


def test_g_checks_pass_on_example(numeric):
    rep = check_g1_g4(numeric, 20_000, 0)
    assert all(r.passed for r in rep.values()), {k: r.issues for k, r in rep.items()}


def test_g2_flags_singular_rate():
    rep = check_g1_g4(crafted.g2_singular_rate(), 20_000, 0, pilot_reps=20, pilot_horizon=0.5)
    assert not rep["G2"].passed


def test_g3_flags_leaky_sampler():
    rep = check_g1_g4(crafted.g3_leaky_kernel(), 20_000, 0)
    assert not rep["G3"].passed
    assert rep["G1"].passed and rep["G2"].passed


def test_g4_flags_zeno_net():
    rep = check_g1_g4(map_sdcpn_to_gshs(net("delay_loop", delta=10_000)), 2000, 0, pilot_reps=10)
    assert not rep["G4"].passed
