"""Statistical comparison of the three backends.

Ensembles from different backends are compared at the level of laws on a
common time grid: chi-square tests on mode occupancy, two-sample
Kolmogorov-Smirnov tests on each continuous component and a Welch test on
jump counts, all under one Bonferroni correction.  A pass means the
ensembles are consistent with bisimilarity at the chosen level; a
statistical harness can only fail to falsify equivalence, never prove it.

``ctmc_oracle`` gives exact occupancy probabilities for the engine and
navigation subsystem of the air-traffic example by uniformization.
"""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import BatchResult, RandomBasis, SolverParams, label_text

BACKENDS = ("sdcpn", "gshs", "hsde")
SYSTEM_STATES = ("engine W / nav W", "engine NW / nav W", "engine NW / nav NW", "engine W / nav NW")


# ---------------------------------------------------------------- ensembles
@dataclass
class Ensemble:
    """Grid samples of ``R`` replications from one backend."""

    backend: str
    model_hash: str | None
    grid: np.ndarray
    labels: list
    modes: np.ndarray          # (R, G) codes into labels
    states: np.ndarray         # (R, G, n), NaN-padded
    jump_counts: np.ndarray
    params: dict
    seed: int
    failures: dict = field(default_factory=dict)   # replication -> (reason, replay key)
    stats: dict = field(default_factory=dict)
    paths: list | None = None

    @property
    def reps(self) -> int:
        return self.modes.shape[0]

    def ok(self) -> np.ndarray:
        mask = np.ones(self.reps, dtype=bool)
        mask[list(self.failures)] = False
        return mask

    def occupancy(self, g: int) -> dict:
        """Counts per mode label at grid index ``g`` (successful replications)."""
        codes = self.modes[self.ok(), g]
        counts = np.bincount(codes, minlength=len(self.labels))
        return {self.labels[c]: int(n) for c, n in enumerate(counts) if n}


def prepare(backend: str, sdcpn, max_nodes: int = 10_000):
    """Backend model for ``sdcpn``: the net itself or its mapped automaton/HSDE."""
    if backend == "sdcpn":
        return sdcpn
    if backend == "gshs":
        from .gshs import map_sdcpn_to_gshs
        return map_sdcpn_to_gshs(sdcpn, max_nodes)
    if backend == "hsde":
        from .hsde import map_sdcpn_to_hsde
        return map_sdcpn_to_hsde(sdcpn, max_nodes)
    raise ValueError(f"unknown backend {backend!r}; expected one of {', '.join(BACKENDS)}")


def _batch_fn(backend):
    if backend == "sdcpn":
        from .sdcpn_exec import simulate_batch
        return simulate_batch
    if backend == "gshs":
        from .gshs import simulate_gshs_batch
        return simulate_gshs_batch
    if backend == "hsde":
        from .hsde import simulate_hsde_batch
        return simulate_hsde_batch
    raise ValueError(f"unknown backend {backend!r}")


def _run_chunk(backend, model, horizon, params, basis, reps, grid_step, record_paths):
    fn = _batch_fn(backend)
    return fn(model, horizon, params, basis, reps, grid_step, record_paths=record_paths)


def _run_chunk_from_text(backend, text, horizon, params, seed, path, reps, grid_step):
    # worker side: models hold closures, so they are rebuilt from their text form
    from . import model_io
    model = prepare(backend, model_io.parse(text))
    basis = RandomBasis(seed)
    for i in path:
        basis = basis.spawn(i)
    return _run_chunk(backend, model, horizon, params, basis, reps, grid_step, False)


def run_ensemble(backend: str, model, reps: int, horizon: float, grid_step: float,
                 params: SolverParams | None = None, seed: int = 0, chunk: int = 20_000,
                 threads: int = 1, record_paths: bool = False) -> Ensemble:
    """``reps`` replications of ``model`` (an SDCPN, mapped on demand).

    Replications run in chunks of at most ``chunk``, chunk ``i`` on the
    substream ``RandomBasis(seed).spawn(i)``; results are merged in chunk
    order, so output does not depend on ``threads``.
    """
    from .sdcpn_model import SdcpnModel
    params = params or SolverParams()
    sdcpn = model if isinstance(model, SdcpnModel) else getattr(model, "sdcpn", None)
    bmodel = prepare(backend, model) if isinstance(model, SdcpnModel) else model
    model_hash = getattr(bmodel, "source_hash", None)
    sizes = [min(chunk, reps - k) for k in range(0, reps, chunk)] or [0]
    root = RandomBasis(seed)
    t0 = time.monotonic()
    text = None
    if threads > 1 and len(sizes) > 1 and not record_paths and sdcpn is not None:
        doc = getattr(sdcpn, "document", None)
        if doc is not None:
            from .model_io import serialize
            text = serialize(doc)
    if text is not None:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = [pool.submit(_run_chunk_from_text, backend, text, horizon, params, seed, (i,), n,
                                grid_step) for i, n in enumerate(sizes)]
            parts = [f.result() for f in futs]
    else:
        parts = [_run_chunk(backend, bmodel, horizon, params, root.spawn(i), n, grid_step, record_paths)
                 for i, n in enumerate(sizes)]
    ens = _merge(backend, model_hash, parts, sizes, params, seed)
    ens.stats["wall_seconds"] = time.monotonic() - t0
    if params.wall_budget is not None and reps:
        per = ens.stats["wall_seconds"] / reps
        ens.stats["wall_per_replication"] = per
        if per > params.wall_budget:
            ens.stats["wall_budget_exceeded"] = True
    return ens


def _merge(backend, model_hash, parts: list[BatchResult], sizes, params, seed) -> Ensemble:
    labels: list = []
    index: dict = {}
    modes, states, jumps, failures, paths = [], [], [], {}, []
    width = max(p.states.shape[2] for p in parts)
    stats_sum: dict = {}
    offset = 0
    for i, (p, n) in enumerate(zip(parts, sizes)):
        remap = np.array([index.setdefault(lab, len(index)) for lab in p.labels] or [0], dtype=np.int64)
        for lab in p.labels:
            if lab not in labels:
                labels.append(lab)
        modes.append(remap[p.modes])
        s = p.states
        if s.shape[2] < width:
            s = np.concatenate([s, np.full(s.shape[:2] + (width - s.shape[2],), np.nan)], axis=2)
        states.append(s)
        jumps.append(p.jump_counts)
        for r, why in p.failures.items():
            failures[offset + r] = (why, {"seed": seed, "chunk": i, "replication": r})
        if p.paths is not None:
            paths.extend(p.paths)
        for k, v in p.stats.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                stats_sum[k] = stats_sum.get(k, 0) + v
        offset += n
    stats_sum["backend"] = backend
    return Ensemble(backend, model_hash, parts[0].grid, labels, np.concatenate(modes),
                    np.concatenate(states), np.concatenate(jumps), params.as_dict(), seed,
                    failures, stats_sum, paths or None)


# ------------------------------------------------------------------ report
@dataclass
class TestRecord:
    kind: str            # occupancy | ks | jumps | oracle
    time: float | None
    component: int | None
    statistic: float
    pvalue: float
    detail: str = ""

    def as_dict(self):
        return {"kind": self.kind, "time": self.time, "component": self.component,
                "statistic": self.statistic, "pvalue": self.pvalue, "detail": self.detail}


@dataclass
class ComparisonReport:
    a: str
    b: str
    alpha: float
    tests: list[TestRecord]
    skipped: list[str]
    jumps: dict
    failures: dict = field(default_factory=dict)

    @property
    def n_tests(self) -> int:
        return len(self.tests)

    @property
    def threshold(self) -> float:
        return self.alpha / max(self.n_tests, 1)

    @property
    def rejected(self) -> list[TestRecord]:
        return [t for t in self.tests if t.pvalue < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.rejected and not self.failures.get("blocking")

    @property
    def min_pvalue(self) -> float:
        return min((t.pvalue for t in self.tests), default=1.0)

    def verdict(self) -> str:
        if self.passed:
            return f"consistent with bisimilarity at alpha={self.alpha:g} (Bonferroni over {self.n_tests} tests)"
        return (f"rejected at alpha={self.alpha:g}: {len(self.rejected)} of {self.n_tests} tests below "
                f"{self.threshold:.3g}")

    def as_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "alpha": self.alpha, "n_tests": self.n_tests,
                "threshold": self.threshold, "passed": self.passed, "verdict": self.verdict(),
                "min_pvalue": self.min_pvalue, "tests": [t.as_dict() for t in self.tests],
                "skipped": list(self.skipped), "jumps": self.jumps, "failures": self.failures}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def table(self) -> str:
        return render_table(self.as_dict())


def render_table(report: dict) -> str:
    """Human-readable table of a report dict (one comparison or a list under ``comparisons``)."""
    items = report.get("comparisons", [report])
    lines = []
    for rep in items:
        lines.append(f"{rep['a']} vs {rep['b']}: {rep['verdict']}")
        lines.append(f"  {'test':<10} {'time':>6} {'comp':>5} {'statistic':>12} {'p-value':>10}")
        for t in rep["tests"]:
            mark = " *" if t["pvalue"] < rep["threshold"] else ""
            time_s = "" if t["time"] is None else f"{t['time']:.3g}"
            comp = "" if t["component"] is None else str(t["component"])
            lines.append(f"  {t['kind']:<10} {time_s:>6} {comp:>5} {t['statistic']:>12.5g} "
                         f"{t['pvalue']:>10.4g}{mark}")
        if rep.get("jumps"):
            j = rep["jumps"]
            lines.append(f"  jumps: mean {j.get('mean_a', float('nan')):.4g} vs "
                         f"{j.get('mean_b', float('nan')):.4g}")
        if rep.get("skipped"):
            lines.append(f"  skipped: {len(rep['skipped'])} degenerate tests")
    return "\n".join(lines)


def _occupancy_table(a: Ensemble, b: Ensemble, g: int):
    labs = list(dict.fromkeys(list(a.labels) + list(b.labels)))
    pos = {lab: i for i, lab in enumerate(labs)}
    table = np.zeros((2, len(labs)))
    for row, e in enumerate((a, b)):
        for lab, n in e.occupancy(g).items():
            table[row, pos[lab]] += n
    keep = table.sum(axis=0) > 0
    return table[:, keep]


def compare(a: Ensemble, b: Ensemble, alpha: float = 0.01) -> ComparisonReport:
    """Equality-in-law tests between two ensembles on the same grid."""
    if a.grid.shape != b.grid.shape or not np.allclose(a.grid, b.grid):
        raise ValueError("ensembles use different time grids")
    tests: list[TestRecord] = []
    skipped: list[str] = []
    oka, okb = a.ok(), b.ok()
    for g, t in enumerate(a.grid):
        tab = _occupancy_table(a, b, g)
        if tab.shape[1] < 2:
            skipped.append(f"occupancy at t={t:g}: single mode in both ensembles")
        else:
            chi2, p, dof, _ = stats.chi2_contingency(tab, correction=False)
            tests.append(TestRecord("occupancy", float(t), None, float(chi2), float(p), f"dof={dof}"))
        n = min(a.states.shape[2], b.states.shape[2])
        for j in range(n):
            xa = a.states[oka, g, j]
            xb = b.states[okb, g, j]
            xa = xa[np.isfinite(xa)]
            xb = xb[np.isfinite(xb)]
            if len(xa) == 0 or len(xb) == 0:
                skipped.append(f"ks t={t:g} component {j}: no samples")
                continue
            if np.ptp(xa) == 0 and np.ptp(xb) == 0:
                if xa[0] == xb[0]:
                    skipped.append(f"ks t={t:g} component {j}: constant in both")
                    continue
            res = stats.ks_2samp(xa, xb)
            tests.append(TestRecord("ks", float(t), j, float(res.statistic), float(res.pvalue)))
    ja, jb = a.jump_counts[oka].astype(float), b.jump_counts[okb].astype(float)
    jumps = {"mean_a": float(ja.mean()) if len(ja) else math.nan,
             "mean_b": float(jb.mean()) if len(jb) else math.nan}
    if len(ja) > 1 and len(jb) > 1 and (ja.var() > 0 or jb.var() > 0):
        res = stats.ttest_ind(ja, jb, equal_var=False)
        ci = res.confidence_interval(1 - alpha)
        jumps.update(difference=float(ja.mean() - jb.mean()), ci=[float(ci.low), float(ci.high)])
        tests.append(TestRecord("jumps", None, None, float(res.statistic), float(res.pvalue)))
    elif len(ja) and len(jb) and ja.mean() != jb.mean():
        tests.append(TestRecord("jumps", None, None, math.inf, 0.0, "constant, different"))
    else:
        skipped.append("jump counts: degenerate")
    failures = {}
    if a.failures or b.failures:
        failures = {"a": len(a.failures), "b": len(b.failures),
                    "blocking": bool(a.failures or b.failures)}
    return ComparisonReport(a.backend, b.backend, alpha, tests, skipped, jumps, failures)


# ------------------------------------------------------------------ oracle
@dataclass
class OracleTable:
    times: np.ndarray
    probs: np.ndarray        # (G, 4) over SYSTEM_STATES
    states: tuple = SYSTEM_STATES


def subsystem_generator(delta3, delta4, delta5, delta6) -> np.ndarray:
    """Generator of the engine x navigation chain (Kronecker sum of two
    two-state chains) over ``SYSTEM_STATES``."""
    eng = np.array([[-delta4, delta4], [delta3, -delta3]], dtype=float)   # W, NW
    nav = np.array([[-delta6, delta6], [delta5, -delta5]], dtype=float)
    G = np.kron(eng, np.eye(2)) + np.kron(np.eye(2), nav)
    # kron order is (engine, nav) = WW, WN, NW, NN; reorder to SYSTEM_STATES
    order = [0, 2, 3, 1]
    return G[np.ix_(order, order)]


def _rates(rates):
    if isinstance(rates, dict):
        return tuple(float(rates[k]) for k in ("delta3", "delta4", "delta5", "delta6"))
    return tuple(float(v) for v in rates)


def ctmc_oracle(rates, t_grid, tol: float = 1e-10, max_terms: int = 100_000,
                p0=None) -> OracleTable:
    """Occupancy probabilities ``p0 exp(G t)`` by uniformization.

    The Poisson weights are summed until the neglected tail mass is below
    ``tol``, which bounds the error of every probability.
    """
    d = _rates(rates)
    if not all(np.isfinite(d)) or any(v < 0 for v in d):
        raise ValueError("rates must be finite and non-negative")
    G = subsystem_generator(*d)
    q = max(float(-G.diagonal().min()), 1e-300)
    P = np.eye(4) + G / q
    p0 = np.array([1.0, 0.0, 0.0, 0.0]) if p0 is None else np.asarray(p0, dtype=float)
    times = np.asarray(t_grid, dtype=float)
    out = np.zeros((len(times), 4))
    for i, t in enumerate(times):
        if t == 0:
            out[i] = p0
            continue
        lam = q * t
        v = p0.copy()
        acc = np.zeros(4)
        mass = 0.0
        for k in range(max_terms):
            w = math.exp(-lam + k * math.log(lam) - math.lgamma(k + 1))
            acc += w * v
            mass += w
            if 1.0 - mass < tol and k > lam:
                break
            v = v @ P
        else:
            raise ArithmeticError(f"uniformization series did not reach tolerance {tol} "
                                  f"within {max_terms} terms at t={t}")
        out[i] = acc
    return OracleTable(times, out)


def ctmc_euler(rates, t_grid, h: float = 1e-8, p0=None) -> np.ndarray:
    """Forward-Euler solution of the Kolmogorov equations, ``(I + h G)^(t/h)``,
    with the power taken by repeated squaring."""
    G = subsystem_generator(*_rates(rates))
    p0 = np.array([1.0, 0.0, 0.0, 0.0]) if p0 is None else np.asarray(p0, dtype=float)
    out = []
    for t in np.asarray(t_grid, dtype=float):
        if t == 0:
            out.append(p0)
            continue
        k = max(int(math.ceil(math.log2(t / h))), 0)
        step = np.eye(4) + (t / 2 ** k) * G
        for _ in range(k):
            step = step @ step
        out.append(p0 @ step)
    return np.array(out)


def airtraffic_system_state(label) -> int:
    """System-state index of a marking of the air-traffic net."""
    counts = tuple(label)
    engine_ok = counts[3] > 0
    nav_ok = counts[5] > 0
    if engine_ok and nav_ok:
        return 0
    if not engine_ok and nav_ok:
        return 1
    if not engine_ok and not nav_ok:
        return 2
    return 3


def compare_to_oracle(e: Ensemble, oracle: OracleTable, alpha: float = 0.01,
                      aggregate=airtraffic_system_state) -> ComparisonReport:
    """Chi-square goodness of fit of aggregated occupancy against the oracle."""
    if len(oracle.times) != len(e.grid) or not np.allclose(oracle.times, e.grid):
        raise ValueError("oracle times differ from the ensemble grid")
    k = oracle.probs.shape[1]
    agg = np.array([aggregate(lab) for lab in e.labels], dtype=np.int64)
    ok = e.ok()
    tests, skipped = [], []
    for g, t in enumerate(e.grid):
        obs = np.bincount(agg[e.modes[ok, g]], minlength=k).astype(float)
        p = oracle.probs[g]
        n = obs.sum()
        zero = p <= 1e-15
        if np.any(obs[zero] > 0):
            tests.append(TestRecord("oracle", float(t), None, math.inf, 0.0,
                                    "occupied state has oracle probability 0"))
            continue
        if (~zero).sum() < 2:
            skipped.append(f"oracle t={t:g}: deterministic state")
            continue
        exp = n * p[~zero] / p[~zero].sum()
        chi2, pv = stats.chisquare(obs[~zero], exp)
        tests.append(TestRecord("oracle", float(t), None, float(chi2), float(pv),
                                f"observed={obs.astype(int).tolist()}"))
    failures = {"ensemble": len(e.failures), "blocking": bool(e.failures)} if e.failures else {}
    return ComparisonReport(e.backend, "oracle", alpha, tests, skipped, {}, failures)


def verify(sdcpn, backends=BACKENDS, reps: int = 10_000, horizon: float = 10.0,
           grid_step: float = 1.0, params: SolverParams | None = None, alpha: float = 0.01,
           seed: int = 0, threads: int = 1, oracle_rates=None) -> dict:
    """Pairwise comparison of ``backends`` on ``sdcpn``; optionally against the oracle."""
    params = params or SolverParams()
    ens = {}
    for i, b in enumerate(backends):
        ens[b] = run_ensemble(b, sdcpn, reps, horizon, grid_step, params, seed=seed + 1000 * (i + 1),
                              threads=threads)
    comps = []
    for i, x in enumerate(backends):
        for y in backends[i + 1:]:
            comps.append(compare(ens[x], ens[y], alpha).as_dict())
    if oracle_rates is not None:
        table = ctmc_oracle(oracle_rates, ens[backends[0]].grid)
        for b in backends:
            comps.append(compare_to_oracle(ens[b], table, alpha).as_dict())
    return {"alpha": alpha, "reps": reps, "horizon": horizon, "grid_step": grid_step, "seed": seed,
            "solver": params.as_dict(), "model_hash": getattr(sdcpn, "source_hash", None),
            "passed": all(c["passed"] for c in comps), "comparisons": comps,
            "wall_seconds": {b: e.stats.get("wall_seconds") for b, e in ens.items()}}


def default_threads() -> int:
    return max(os.cpu_count() or 1, 1)


def labels_text(e: Ensemble) -> list[str]:
    return [label_text(lab) for lab in e.labels]
