import json
import math
from fractions import Fraction

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from stochhybrid._hybrid import ThinningError
from stochhybrid.core import ModeId, RandomBasis, SolverParams
from stochhybrid.gshs import MappingError, map_sdcpn_to_gshs
from stochhybrid.hsde import (HsdeModel, check_h1_h8, constant_rho, euclidean_mode_metric, hsde_to_json,
                              map_sdcpn_to_hsde, q_from_psi_rho_mu, rho_rows_sum_to_one, sigma,
                              sigma_exact, simulate_hsde, simulate_hsde_batch)
from stochhybrid.model_io import airtraffic_example

import crafted
from crafted import net
from example_tables import DEFAULTS, NAMES, TABLE_SPONTANEOUS, d3, d4, d5, d6


@pytest.fixture(scope="module")
def example():
    return map_sdcpn_to_hsde(airtraffic_example())


def test_mapped_example_shape(example):
    assert example.N == 8 and example.n == 6
    assert example.psi is None and example.psi_tag == "zero"
    assert example.C_Lambda_exact == Fraction(7, 2)
    assert example.C_Lambda == 3.5
    assert [m.name for m in example.modes] == NAMES


def test_symbolic_bound_is_max_of_rate_sums():
    model = map_sdcpn_to_hsde(airtraffic_example(symbolic=True))
    assert model.C_Lambda_exact == sympy.Max(d4 + d6, d3 + d6, d3 + d5, d4 + d5)
    with pytest.raises(MappingError, match="symbolic"):
        model.rho(np.array([0]), np.zeros((1, 6)))


@pytest.mark.parametrize("src", NAMES)
def test_rho_rows_equal_spontaneous_table(example, src):
    i = NAMES.index(src)
    for j, dst in enumerate(NAMES):
        want = Fraction(str(sympy.sympify(TABLE_SPONTANEOUS.get((src, dst), 0)).subs(DEFAULTS)))
        assert example.rho_exact[i][j] == want
    np.testing.assert_allclose(example.rho(np.array([i]), np.zeros((1, 6)))[0],
                               [float(v) for v in example.rho_exact[i]])


def test_rho_normalization(example):
    assert rho_rows_sum_to_one(example)
    rng = np.random.default_rng(0)
    th = rng.integers(8, size=500)
    P = example.rho(th, rng.normal(size=(500, 6)))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("theta", range(8))
def test_sigma_monotone_up_to_lambda(example, theta):
    x = np.zeros(6)
    vals = [sigma(example, i, theta, x) for i in range(9)]
    assert vals[0] == 0
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(float(example.Lambda[theta].value))
    assert sigma_exact(example, 8, theta) == example.Lambda[theta].value


def test_mode_metric_separates_example_modes(example):
    d = [euclidean_mode_metric(a, b) for i, a in enumerate(example.modes) for b in example.modes[i + 1:]]
    assert min(d) == pytest.approx(math.sqrt(2))


def test_single_mode_net():
    model = map_sdcpn_to_hsde(net("ou_single"))
    assert model.N == 1 and model.C_Lambda == 0
    assert float(model.Lambda[0].value) == 0
    assert model.rho_exact == [[Fraction(1)]]


def test_colour_changing_firing_is_rejected():
    with pytest.raises(MappingError, match="psi=0"):
        map_sdcpn_to_hsde(net("colour_shift"))


def test_q_with_zero_psi(example):
    x = np.zeros(6)
    inside = lambda y: np.all(np.abs(y) < 1, axis=1)  # noqa: E731
    outside = lambda y: np.all(np.abs(y) > 1, axis=1)  # noqa: E731
    assert q_from_psi_rho_mu(example, 1, inside, 0, x) == (pytest.approx(2 / 3), 0.0)
    assert q_from_psi_rho_mu(example, 1, outside, 0, x) == (0.0, 0.0)


def test_q_with_uniform_mark_displacement():
    model = crafted.base_hsde(psi=lambda tgt, src, X, Z: Z, psi_tag="mark", rho=constant_rho([[0.3, 0.7],
                                                                                             [1, 0]]))
    x = np.array([2.0])
    half = lambda y: (y[:, 0] >= 2.0) & (y[:, 0] <= 2.5)  # noqa: E731
    est, se = q_from_psi_rho_mu(model, 1, half, 0, x, 20_000, np.random.default_rng(0))
    assert abs(est - 0.35) <= 3 * se


def test_q_agrees_with_gshs_kernel(example):
    gs = map_sdcpn_to_gshs(airtraffic_example())
    rng = np.random.default_rng(1)
    everywhere = lambda y: np.ones(len(y), dtype=bool)  # noqa: E731
    for theta in range(8):
        for tgt in range(8):
            est, _ = q_from_psi_rho_mu(example, tgt, everywhere, theta, np.zeros(6), rng=rng)
            assert est == pytest.approx(float(gs.kernel.spontaneous[theta][tgt]), abs=1e-15)


def test_thinning_acceptance_rate(example):
    res = simulate_hsde_batch(example, 10.0, SolverParams(dt=1e-2), RandomBasis(3), 400, 5.0)
    s = res.stats
    p_hat = s["accepted"] / s["points"]
    p_want = s["lambda_integral"] / s["time"] / example.C_Lambda
    se = math.sqrt(p_want * (1 - p_want) / s["points"])
    assert abs(p_hat - p_want) <= 3 * se


def test_thinning_bound_violation_raises():
    with pytest.raises(ThinningError):
        simulate_hsde(crafted.h3_rate_above_bound(), 5.0, SolverParams(dt=1e-2))


def test_path_cadlag_and_x_kept_at_spontaneous_jumps(example):
    path = simulate_hsde(example, 5.0, SolverParams(dt=1e-3), seed=4)
    assert path.check_cadlag() == []
    for k, t in enumerate(path.jump_times[1:]):
        if path.jump_kinds[k] == "spontaneous":
            np.testing.assert_array_equal(path.left_limit(t), path.value_at(t))


def test_batch_reproducible(example):
    kw = dict(horizon=2.0, params=SolverParams(dt=1e-2), reps=30, grid_step=1.0)
    a = simulate_hsde_batch(example, basis=RandomBasis(2), **kw)
    b = simulate_hsde_batch(example, basis=RandomBasis(2), **kw)
    np.testing.assert_array_equal(a.states, b.states)


def test_export(example):
    doc = json.loads(hsde_to_json(example))
    assert doc["C_Lambda"] == [7, 2]
    assert doc["psi"] == "zero"
    assert doc["mu"] == {"tag": "uniform[0,1]^1", "dim": 1}
    assert doc["rho"][0][1] == [2, 3]
    assert doc["mode_order"] == NAMES


def test_h_checks_pass_on_example(example):
    rep = check_h1_h8(example, 100_000, 0)
    assert all(r.passed for r in rep.values()), {k: r.issues for k, r in rep.items()}
    assert rep["H8"].details["min_distance"] == pytest.approx(math.sqrt(2))


def test_h_checks_pass_on_base_model():
    rep = check_h1_h8(crafted.base_hsde(), 20_000, 0)
    assert all(r.passed for r in rep.values())


@pytest.mark.parametrize("name", sorted(crafted.HSDE_VIOLATIONS))
def test_each_violation_is_flagged(name):
    rep = check_h1_h8(crafted.HSDE_VIOLATIONS[name](), 100_000, 0)
    assert not rep[name].passed
    assert rep[name].issues


def test_psi_self_jump_larger_than_one_is_allowed():
    model = crafted.base_hsde(psi=lambda t, s, X, Z: np.full((len(X), 1), 2.0), psi_tag="two",
                              rho=constant_rho([[1, 0], [0, 1]]))
    assert check_h1_h8(model, 20_000, 0)["H6"].passed


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=5))
def test_sigma_partition_targets(weights):
    n = len(weights)
    w = np.array(weights) / sum(weights)
    model = HsdeModel(modes=[ModeId(i, tuple(int(j == i) * 2 for j in range(n))) for i in range(n)], n=1,
                      f=[None] * n, g=[None] * n, domains=[None] * n,
                      Lambda=[crafted.ConstantRate(3.0)] * n, C_Lambda=3.0,
                      rho=constant_rho([list(w)] * n))
    x = np.zeros(1)
    vals = [sigma(model, i, 0, x) for i in range(n + 1)]
    np.testing.assert_allclose(np.diff(vals), 3.0 * w)
