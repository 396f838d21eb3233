import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochhybrid.core import SolverParams
from stochhybrid.equivalence import (SYSTEM_STATES, airtraffic_system_state, compare, compare_to_oracle,
                                     ctmc_euler, ctmc_oracle, run_ensemble, subsystem_generator, verify)
from stochhybrid.model_io import airtraffic_example

RATES = dict(delta3=2, delta4=1, delta5=1.5, delta6=0.5)
COARSE = SolverParams(dt=1e-2)


@pytest.fixture(scope="module")
def nolanding():
    return airtraffic_example(landing=False)


def test_oracle_at_time_zero():
    tab = ctmc_oracle(RATES, [0.0])
    np.testing.assert_array_equal(tab.probs[0], [1, 0, 0, 0])
    assert tab.states == SYSTEM_STATES


def test_oracle_symmetric_rates_reach_uniform():
    tab = ctmc_oracle((1.0, 1.0, 0.7, 0.7), [40.0])
    np.testing.assert_allclose(tab.probs[0], 0.25, atol=1e-8)


def test_oracle_two_state_closed_form():
    tab = ctmc_oracle((2.0, 1.0, 0.0, 0.0), [1.0])
    p_engine_down = tab.probs[0][1] + tab.probs[0][2]
    assert abs(p_engine_down - (1 - math.exp(-3)) / 3) < 1e-10


def test_generator_rows_sum_to_zero():
    G = subsystem_generator(2, 1, 1.5, 0.5)
    np.testing.assert_allclose(G.sum(axis=1), 0, atol=1e-15)
    assert G[0, 1] == 1 and G[0, 3] == 0.5  # engine fails, navigation fails


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.floats(0.05, 5)] * 4), st.floats(0.01, 10))
def test_oracle_matches_forward_euler(rates, t):
    a = ctmc_oracle(rates, [t]).probs
    b = ctmc_euler(rates, [t])
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert a.sum() == pytest.approx(1, abs=1e-9)


def test_oracle_truncation_budget():
    with pytest.raises(ArithmeticError):
        ctmc_oracle((50, 50, 50, 50), [100.0], max_terms=10)


@pytest.mark.parametrize("label, state", [
    ((1, 0, 0, 1, 0, 1, 0), 0), ((0, 1, 1, 0, 0, 1, 0), 1), ((0, 1, 1, 0, 1, 0, 0), 2),
    ((0, 1, 0, 1, 1, 0, 0), 3), ((0, 0, 1, 0, 1, 0, 1), 2),
])
def test_system_state_aggregation(label, state):
    assert airtraffic_system_state(label) == state


@pytest.mark.parametrize("backend", ["sdcpn", "gshs", "hsde"])
def test_single_replication_ensemble(nolanding, backend):
    e = run_ensemble(backend, nolanding, 1, 2.0, 1.0, COARSE, seed=3)
    assert e.reps == 1 and e.modes.shape == (1, 3)
    assert e.model_hash == nolanding.source_hash


def test_ensembles_are_deterministic_and_chunk_layout_fixed(nolanding):
    a = run_ensemble("gshs", nolanding, 300, 2.0, 1.0, COARSE, seed=4, chunk=100)
    b = run_ensemble("gshs", nolanding, 300, 2.0, 1.0, COARSE, seed=4, chunk=100, threads=2)
    np.testing.assert_array_equal(a.modes, b.modes)
    np.testing.assert_array_equal(a.states, b.states)
    c = run_ensemble("gshs", nolanding, 300, 2.0, 1.0, COARSE, seed=5, chunk=100)
    assert not np.array_equal(a.states, c.states)


def test_self_comparison_passes_with_zero_statistics(nolanding):
    e = run_ensemble("hsde", nolanding, 400, 2.0, 1.0, COARSE, seed=1)
    rep = compare(e, e)
    assert rep.passed
    assert all(t.statistic == 0 for t in rep.tests)
    assert any("constant in both" in s for s in rep.skipped)  # the t=0 colour
    assert "consistent with bisimilarity" in rep.verdict()


def test_t0_only_grid_passes_oracle(nolanding):
    e = run_ensemble("sdcpn", nolanding, 50, 1.0, 1.0, COARSE, seed=2)
    e = replace(e, grid=e.grid[:1], modes=e.modes[:, :1], states=e.states[:, :1])
    rep = compare_to_oracle(e, ctmc_oracle(RATES, e.grid))
    assert rep.passed and rep.tests == []


def test_grid_mismatch_is_an_error(nolanding):
    a = run_ensemble("gshs", nolanding, 5, 2.0, 1.0, COARSE)
    b = run_ensemble("gshs", nolanding, 5, 2.0, 0.5, COARSE)
    with pytest.raises(ValueError, match="grid"):
        compare(a, b)


def test_null_rejection_rate(nolanding):
    trials, alpha = 30, 0.01
    rejected = 0
    for k in range(trials):
        a = run_ensemble("gshs", nolanding, 300, 2.0, 1.0, COARSE, seed=100 + 2 * k)
        b = run_ensemble("gshs", nolanding, 300, 2.0, 1.0, COARSE, seed=101 + 2 * k)
        rejected += not compare(a, b, alpha).passed
    assert rejected / trials <= alpha + 2 * math.sqrt(alpha / trials)


def test_power_against_doubled_engine_failure_rate(nolanding):
    a = run_ensemble("gshs", nolanding, 10_000, 3.0, 1.0, COARSE, seed=7)
    b = run_ensemble("gshs", airtraffic_example(delta4=2, landing=False), 10_000, 3.0, 1.0, COARSE, seed=8)
    rep = compare(a, b)
    assert not rep.passed
    assert any(t.kind == "occupancy" for t in rep.rejected)


def test_power_against_swapped_rates():
    swapped = airtraffic_example(delta3=1, delta4=2, landing=False)
    e = run_ensemble("gshs", swapped, 10_000, 3.0, 1.0, COARSE, seed=9)
    assert not compare_to_oracle(e, ctmc_oracle(RATES, e.grid)).passed
    assert compare_to_oracle(e, ctmc_oracle((1, 2, 1.5, 0.5), e.grid)).passed


def test_failed_replications_block_a_pass():
    from crafted import net
    model = net("delay_loop", delta=1000)
    params = SolverParams(dt=1e-2, max_jumps=50)
    a = run_ensemble("sdcpn", model, 5, 1.0, 1.0, params)
    rep = compare(a, a)
    assert a.failures and not rep.passed
    why, key = a.failures[0]
    assert key == {"seed": 0, "chunk": 0, "replication": 0}


def test_verify_report_structure(nolanding):
    rep = verify(nolanding, ("sdcpn", "gshs"), 200, 1.0, 1.0, COARSE, seed=3, oracle_rates=RATES)
    assert [(c["a"], c["b"]) for c in rep["comparisons"]] == [("sdcpn", "gshs"), ("sdcpn", "oracle"),
                                                              ("gshs", "oracle")]
    for c in rep["comparisons"]:
        assert all(0 <= t["pvalue"] <= 1 for t in c["tests"])
    assert rep["model_hash"] == nolanding.source_hash
