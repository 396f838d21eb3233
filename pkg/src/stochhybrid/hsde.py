"""Hybrid stochastic differential equations.

The mode switches and the state jumps are driven by a Poisson random
measure.  Points arrive at the constant rate ``C_Lambda`` with a mark
``z1`` uniform on ``(0, C_Lambda]`` and a mark ``zbar ~ mu``; a point is
accepted when ``z1 <= Lambda(theta, x)``, and the target mode is the one
whose slice ``(Sigma_{i-1}, Sigma_i]`` contains ``z1``.  Points with
``z1 > C_Lambda`` could never be accepted, so generating only
``(0, C_Lambda]`` is exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
import sympy

from . import conditions
from ._hybrid import HybridEngine, ThinningError, run_batch
from .core import BatchResult, HybridPath, ModeId, RandomBasis, SolverParams
from .gshs import (CheckResult, ConstRate, MappingError, _exact_json, _ref_text, is_one,
                   map_sdcpn_to_gshs, pilot_jump_check)
from .sdcpn_model import SdcpnModel

THINNING_SLACK = 1e-12


def euclidean_mode_metric(a: ModeId, b: ModeId) -> float:
    """Euclidean distance between marking count vectors (index distance otherwise)."""
    if a.marking is not None and b.marking is not None:
        return float(np.linalg.norm(np.subtract(a.marking, b.marking, dtype=float)))
    return float(abs(a.index - b.index))


def uniform_mu(d: int = 1):
    """Uniform measure on [0, 1]^d: ``(sampler, ppf)``."""
    return (lambda rng, m: rng.random((m, d))), (lambda u: np.asarray(u, dtype=float))


@dataclass
class HsdeModel:
    """Mode set, per-mode SDE, jump intensity ``Lambda`` bounded by
    ``C_Lambda``, target-mode law ``rho`` and jump displacement ``psi``.

    ``rho(theta, X)`` returns an ``(m, N)`` array whose row ``r`` holds
    ``rho(vartheta_j, theta_r, X_r)``; ``rho_exact[theta][j]`` keeps exact
    entries when they do not depend on x.  ``psi(target, source, X, Z)``
    returns ``(m, n)`` displacements; ``None`` means ``psi = 0``.  ``mu``
    samples marks and ``mu_ppf`` is its inverse CDF, applied per coordinate.
    ``boundary(theta, X, rng)`` samples post-jump states on mode boundaries.
    """

    modes: list[ModeId]
    n: int
    f: list
    g: list
    domains: list
    Lambda: list
    C_Lambda: float
    rho: Callable
    init: Callable | None = None
    init_batch_fn: Callable | None = None
    psi: Callable | None = None
    psi_tag: str = "zero"
    mark_dim: int = 1
    mu: Callable | None = None
    mu_ppf: Callable | None = None
    mu_tag: str = "uniform[0,1]^1"
    boundary: Callable | None = None
    rho_exact: list | None = None
    C_Lambda_exact: object = None
    metric: Callable = euclidean_mode_metric
    name: str = "hsde"
    source_hash: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mu is None:
            self.mu, self.mu_ppf = uniform_mu(self.mark_dim)
        self.metadata.setdefault("mode_order", [m.label for m in self.modes])
        self._const_lam = None
        if all(getattr(r, "is_constant", False) for r in self.Lambda):
            try:
                self._const_lam = np.array([float(r.value) for r in self.Lambda])
            except TypeError:  # symbolic
                pass

    @property
    def N(self) -> int:
        return len(self.modes)

    @property
    def dims(self):
        return [self.n] * len(self.modes)

    def init_batch(self, rng, reps):
        if self.init_batch_fn is not None:
            return self.init_batch_fn(rng, reps)
        th = np.zeros(reps, dtype=np.int64)
        xs = []
        for r in range(reps):
            t, x = self.init(rng)
            th[r] = t
            xs.append(np.asarray(x, dtype=float))
        return th, xs

    def lam(self, theta, X) -> np.ndarray:
        theta = np.asarray(theta)
        if self._const_lam is not None:
            return self._const_lam[theta]
        out = np.zeros(len(theta))
        for k in np.flatnonzero(np.bincount(theta, minlength=self.N)):
            sel = theta == k
            out[sel] = self.Lambda[k](X[sel])
        return out

    def boundary_sample(self, theta, X, rng):
        if self.boundary is None:
            raise MappingError("boundary hit but the model has no boundary kernel")
        return self.boundary(theta, X, rng)

    def spontaneous_sample(self, theta, X, rng):  # jumps come from the Poisson points
        raise NotImplementedError


def constant_rho(rows) -> Callable:
    """``rho`` from a fixed row-stochastic matrix ``rows[theta][target]``."""
    P = np.array([[float(v) for v in row] for row in rows])

    def rho(theta, X):
        return P[np.asarray(theta)]

    return rho


def sigma(model: HsdeModel, i: int, theta: int, x) -> float:
    """``Lambda(theta, x) * sum_{j <= i} rho(vartheta_j, theta, x)`` (0 for ``i = 0``)."""
    if not 0 <= i <= model.N:
        raise ValueError(f"i must lie in [0, {model.N}]")
    if i == 0:
        return 0.0
    X = np.atleast_2d(np.asarray(x, dtype=float))
    lam = float(model.Lambda[theta](X)[0])
    if i == model.N:
        return lam
    return lam * float(np.sum(model.rho(np.array([theta]), X)[0, :i]))


def sigma_exact(model: HsdeModel, i: int, theta: int):
    """Exact ``Sigma_i`` for x-independent intensities and ``rho``."""
    rate = model.Lambda[theta]
    if model.rho_exact is None or not getattr(rate, "is_constant", False):
        raise ValueError("Sigma depends on x for this model")
    total = Fraction(0) if not isinstance(rate.value, sympy.Basic) else sympy.Integer(0)
    for j in range(i):
        total = total + model.rho_exact[theta][j]
    out = _as_sym(rate.value) * _as_sym(total) if _symbolic(rate.value, total) else rate.value * total
    return sympy.simplify(out) if isinstance(out, sympy.Basic) else out


def _symbolic(*vals):
    return any(isinstance(v, sympy.Basic) for v in vals)


def _as_sym(v):
    return sympy.Rational(v.numerator, v.denominator) if isinstance(v, Fraction) else v


# ------------------------------------------------------------------ engine
class _HsdeEngine(HybridEngine):
    kind = "hsde"

    def extra_streams(self):
        return ["poisson", "marks"]

    def on_start(self):
        C = float(self.model.C_Lambda)
        if not (C >= 0 and math.isfinite(C)):
            raise ValueError("C_Lambda must be finite and non-negative")
        self.C = C
        self.upois = self.basis.stream("poisson")
        self.umark = self.basis.stream("marks")
        self.stats.update(points=0, accepted=0, lambda_integral=0.0, time=0.0)

    def reset_clocks(self, idx, now):
        if self.C <= 0:
            self.next_sched[idx] = math.inf
            return
        self.next_sched[idx] = now + (-np.log1p(-self.upois.random(len(idx)))) / self.C

    def advance(self, act, h):
        Xprev = super().advance(act, h)
        ia = np.flatnonzero(act)
        if ia.size:
            lam = self.model.lam(self.theta[ia], Xprev[ia] if self.model._const_lam is None else None)
            self.stats["lambda_integral"] += float(lam @ h[ia])
            self.stats["time"] += float(h[ia].sum())
        return Xprev

    def scheduled(self, idx):
        m = self.model
        X = self.X[idx]
        th = self.theta[idx]
        z1 = self.C * (1.0 - self.upois.random(len(idx)))
        lam = m.lam(th, X)
        over = lam > self.C * (1 + THINNING_SLACK)
        if over.any():
            r = int(idx[np.flatnonzero(over)[0]])
            msg = (f"thinning unsound: Lambda={lam[over][0]:.6g} exceeds C_Lambda={self.C:.6g} "
                   f"in mode {m.modes[self.theta[r]]}")
            if self.raise_errors:
                raise ThinningError(msg)
            self.fail(idx[over], msg)
        self.stats["points"] += len(idx)
        acc = (z1 <= lam) & ~over
        rej = idx[~acc]
        if rej.size:
            self.reset_clocks(rej, self.t[rej])
        ia = idx[acc]
        if ia.size == 0:
            return ia
        self.stats["accepted"] += int(ia.size)
        th_a, X_a, z_a, lam_a = th[acc], X[acc], z1[acc], lam[acc]
        cum = np.cumsum(m.rho(th_a, X_a), axis=1) * lam_a[:, None]
        target = np.minimum((cum < z_a[:, None]).sum(axis=1), m.N - 1)
        if m.psi is not None:
            Z = m.mu(self.umark, ia.size)
            X_a = X_a + np.asarray(m.psi(target, th_a, X_a, Z), dtype=float)
        self.set_state(ia, target, X_a)
        return ia

    def apply(self, idx, kind, sampled=False, th=None, X=None):
        super().apply(idx, kind, sampled, th, X)


def simulate_hsde(model: HsdeModel, horizon: float, params: SolverParams | None = None,
                  basis: RandomBasis | None = None, seed: int = 0) -> HybridPath:
    """One solution path over ``[0, horizon]``; a Lambda above C_Lambda raises
    :class:`ThinningError`."""
    params = params or SolverParams()
    basis = basis if basis is not None else RandomBasis(seed)
    res = run_batch(_HsdeEngine, model, horizon, params, basis, 1, horizon, record_paths=True,
                    raise_errors=True)
    return res.paths[0]


def simulate_hsde_batch(model: HsdeModel, horizon: float, params: SolverParams, basis: RandomBasis,
                        reps: int, grid_step: float, record_paths: bool = False) -> BatchResult:
    return run_batch(_HsdeEngine, model, horizon, params, basis, reps, grid_step, record_paths)


# ----------------------------------------------------------------- kernel
def q_from_psi_rho_mu(model: HsdeModel, target: int, A: Callable, theta: int, x,
                      budget: int = 10_000, rng: np.random.Generator | None = None):
    """Estimate ``Q({target} x A; theta, x) = rho * mu{z : x + psi(z) in A}``.

    Returns ``(estimate, standard error)``; exact (SE 0) when ``psi = 0``.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    r = float(model.rho(np.array([theta]), x)[0, target])
    if model.psi is None:
        return r * float(bool(np.asarray(A(x))[0])), 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    Z = model.mu(rng, budget)
    X = np.repeat(x, budget, axis=0)
    disp = model.psi(np.full(budget, target), np.full(budget, theta), X, Z)
    hits = np.asarray(A(X + disp), dtype=float)
    p = hits.mean()
    return r * p, r * math.sqrt(max(p * (1 - p), 0.0) / budget)


# ---------------------------------------------------------------- mapping
def map_sdcpn_to_hsde(sdcpn: SdcpnModel, max_nodes: int = 10_000,
                      params: SolverParams | None = None) -> HsdeModel:
    """HSDE with ``psi = 0`` whose ``rho`` rows are the spontaneous jump
    law of the equivalent hybrid automaton.

    Only nets whose spontaneous jumps keep the continuous state and whose
    target-mode law does not depend on it are covered; others raise
    :class:`MappingError`.
    """
    gs = map_sdcpn_to_gshs(sdcpn, max_nodes, params)
    dims = set(gs.dims)
    if len(dims) != 1:
        raise MappingError(f"outside the psi=0 mapping fragment: mode dimensions differ {sorted(dims)}")
    if not gs.kernel.preserving:
        raise MappingError("outside the psi=0 mapping fragment: "
                           f"{gs.metadata.get('inexact_reason')}; specify psi and mu by hand")
    if not all(r.is_constant for r in gs.rates):
        raise MappingError("outside the psi=0 mapping fragment: jump rates depend on the state")
    n = dims.pop()
    exact_rates = [r.value for r in gs.rates]
    if any(isinstance(v, sympy.Basic) for v in exact_rates):
        C_exact = sympy.Max(*[sympy.sympify(_as_sym(v)) for v in exact_rates])
    else:
        C_exact = max(exact_rates) if exact_rates else Fraction(0)
    try:
        C = float(C_exact)
        rho = constant_rho(gs.kernel.spontaneous)
    except TypeError:  # symbolic rates: structure only, not simulable
        C = math.nan
        rho = _symbolic_rho

    def boundary(theta, X, rng):
        return gs.kernel.sample_batch(theta, X, True, rng)

    model = HsdeModel(list(gs.modes), n, list(gs.f), list(gs.g), list(gs.domains),
                      [ConstRate(v) for v in exact_rates], C, rho, gs.init, gs.init_batch_fn,
                      boundary=boundary, rho_exact=gs.kernel.spontaneous, C_Lambda_exact=C_exact,
                      name=gs.name, source_hash=gs.source_hash)
    model.gshs = gs
    model.sdcpn = sdcpn
    return model


def _symbolic_rho(theta, X):
    raise MappingError("rates are symbolic; bind them to numbers to simulate")


# ----------------------------------------------------------------- checks
def _mode_points(model, k, rng, m, radius):
    x = conditions.ball(rng, 4 * m, model.n, radius)
    dom = model.domains[k]
    if dom is not None and not getattr(dom, "never_hit", False):
        x = x[dom.distance(x) < 0]
    return x[:m]


def check_h1_h8(model: HsdeModel, budget: int = 100_000, seed: int = 0,
                pilot_reps: int = 200, pilot_horizon: float = 2.0) -> dict[str, CheckResult]:
    """Falsification checks of the well-posedness conditions H1-H8.

    Each entry reports whether a violation was found at the given sample
    budget; a pass is evidence, not proof.
    """
    rng = np.random.default_rng(seed)
    N, n = model.N, model.n
    per_mode = max(budget // (8 * max(N, 1)), 200)
    report = {}

    ests = {str(m): conditions.estimate(str(m), model.f[k], model.g[k], n, rng, sample_count=per_mode)
            for k, m in enumerate(model.modes)}
    bad = [k for k, e in ests.items() if e.growth_unbounded]
    report["H1"] = CheckResult("H1", not bad, {k: e.as_dict() for k, e in ests.items()},
                               [f"mode {k}: growth estimate diverges {ests[k].growth}" for k in bad])
    bad = [k for k, e in ests.items() if e.local_unbounded]
    report["H2"] = CheckResult("H2", not bad, {k: list(e.local) for k, e in ests.items()},
                               [f"mode {k}: local Lipschitz estimate diverges {ests[k].local}" for k in bad])

    issues, sups = [], {}
    C = float(model.C_Lambda)
    for k, m in enumerate(model.modes):
        top = 0.0
        for r in conditions.RADII:
            x = conditions.ball(rng, per_mode // 3, n, r)
            with np.errstate(all="ignore"):
                lam = np.asarray(model.Lambda[k](x), dtype=float)
            if not np.all(np.isfinite(lam)) or np.any(lam < 0):
                issues.append(f"mode {m}: Lambda not finite and non-negative")
                break
            top = max(top, float(lam.max()))
        sups[str(m)] = top
        if top > C * (1 + THINNING_SLACK):
            issues.append(f"mode {m}: Lambda reaches {top:.6g} > C_Lambda = {C:.6g}")
    report["H3"] = CheckResult("H3", not issues, {"C_Lambda": C, "sup_Lambda": sups}, issues)

    report["H4"] = _check_rho_continuity(model, rng, per_mode)
    report["H5"] = _check_psi_integrable(model, rng, per_mode)
    report["H6"] = _check_psi_self(model, rng, per_mode)
    report["H7"] = pilot_jump_check(simulate_hsde_batch, model, pilot_reps, pilot_horizon, seed, "H7")

    issues, dmin = [], math.inf
    for i in range(N):
        for j in range(i + 1, N):
            d = model.metric(model.modes[i], model.modes[j])
            dmin = min(dmin, d)
            if not d > 1:
                issues.append(f"modes {model.modes[i]} and {model.modes[j]} at distance {d:.6g} <= 1")
    report["H8"] = CheckResult("H8", not issues, {"min_distance": dmin if N > 1 else None}, issues)
    return report


def _check_rho_continuity(model, rng, m):
    issues = []
    sums_bad = 0
    for k, mode in enumerate(model.modes):
        x = _mode_points(model, k, rng, m, 1.0)
        if len(x) < 2:
            continue
        th = np.full(len(x), k)
        P = np.asarray(model.rho(th, x), dtype=float)
        if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12) or np.any(P < 0):
            sums_bad += 1
            issues.append(f"mode {mode}: rho is not a probability vector")
            continue
        y = x[rng.permutation(len(x))]
        Q = np.asarray(model.rho(th, y), dtype=float)
        jump = np.abs(P - Q).max(axis=1) > 0.1
        for r in np.flatnonzero(jump)[:20]:
            a, b = x[r], y[r]
            pa = model.rho(np.array([k]), a[None, :])[0]
            for _ in range(40):  # bisection keeps a pair with a large difference
                mid = 0.5 * (a + b)
                pm = model.rho(np.array([k]), mid[None, :])[0]
                if np.abs(pa - pm).max() > 0.05:
                    b = mid
                else:
                    a, pa = mid, pm
            pb = model.rho(np.array([k]), b[None, :])[0]
            if np.abs(pa - pb).max() > 0.05:
                issues.append(f"mode {mode}: rho jumps by {np.abs(pa - pb).max():.3g} near x={b.tolist()}")
                break
    return CheckResult("H4", not issues, {}, issues)


def _check_psi_integrable(model, rng, m):
    if model.psi is None:
        return CheckResult("H5", True, {"psi": "zero"}, [])
    issues, means = [], {}
    N, d = model.N, model.mark_dim
    for k, mode in enumerate(model.modes):
        x = _mode_points(model, k, rng, 16, 1.0)
        if len(x) == 0:
            continue
        worst = 0.0
        for tgt in range(N):
            Z = model.mu(rng, m)
            X = x[rng.integers(len(x), size=m)]
            with np.errstate(all="ignore"):
                v = np.linalg.norm(np.asarray(model.psi(np.full(m, tgt), np.full(m, k), X, Z)), axis=1)
            if not np.all(np.isfinite(v)):
                issues.append(f"mode {mode} -> {model.modes[tgt]}: psi not finite")
                continue
            worst = max(worst, float(v.mean()))
            if model.mu_ppf is None:
                continue
            # tail probe: u |psi(F^-1(u))| must vanish as u -> 0 or 1
            for j in range(d):
                for side in (0, 1):
                    vals = []
                    for u in (1e-4, 1e-12):
                        U = np.full((1, d), 0.5)
                        U[0, j] = u if side == 0 else 1 - u
                        with np.errstate(all="ignore"):
                            z = model.mu_ppf(U)
                            p = np.linalg.norm(np.asarray(model.psi(np.array([tgt]), np.array([k]),
                                                                    x[:1], z)), axis=1)[0]
                        vals.append(u * p)
                    if vals[0] > 0 and (not np.isfinite(vals[1]) or vals[1] > 0.1 * vals[0]):
                        issues.append(f"mode {mode} -> {model.modes[tgt]}: psi tail is not integrable "
                                      f"in mark coordinate {j}")
        means[str(mode)] = worst
    issues = list(dict.fromkeys(issues))
    return CheckResult("H5", not issues, {"mean_abs_psi": means}, issues)


def _check_psi_self(model, rng, m):
    if model.psi is None:
        return CheckResult("H6", True, {"psi": "zero"}, [])
    issues = []
    for k, mode in enumerate(model.modes):
        x = _mode_points(model, k, rng, m, 1.0)
        if len(x) == 0:
            continue
        Z = model.mu(rng, len(x))
        th = np.full(len(x), k)
        v = np.linalg.norm(np.asarray(model.psi(th, th, x, Z), dtype=float), axis=1)
        bad = (v > 0) & (v <= 1)
        if bad.any():
            issues.append(f"mode {mode}: self-jump displacement {v[bad][0]:.3g} is neither 0 nor > 1")
    return CheckResult("H6", not issues, {}, issues)


# ------------------------------------------------------------------ export
def hsde_to_dict(model: HsdeModel) -> dict:
    rows = model.rho_exact
    return {
        "kind": "hsde",
        "name": model.name,
        "source_hash": model.source_hash,
        "n": model.n,
        "modes": [{"index": m.index, "name": m.name,
                   "marking": list(m.marking) if m.marking is not None else None} for m in model.modes],
        "mode_order": [str(m) for m in model.modes],
        "C_Lambda": _exact_json(model.C_Lambda_exact) if model.C_Lambda_exact is not None
        else float(model.C_Lambda),
        "Lambda": [_exact_json(r.value) if getattr(r, "is_constant", False) else _ref_text(r)
                   for r in model.Lambda],
        "rho": None if rows is None else [[_exact_json(v) for v in row] for row in rows],
        "psi": model.psi_tag,
        "mu": {"tag": model.mu_tag, "dim": model.mark_dim},
    }


def hsde_to_json(model: HsdeModel) -> str:
    return json.dumps(hsde_to_dict(model), indent=2)


def rho_rows_sum_to_one(model: HsdeModel) -> bool:
    return model.rho_exact is not None and all(is_one(sum(row, Fraction(0)) if not any(
        isinstance(v, sympy.Basic) for v in row) else sympy.Add(*[_as_sym(v) for v in row]))
        for row in model.rho_exact)
