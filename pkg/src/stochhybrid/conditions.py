"""Sampling estimators for growth and Lipschitz constants.

These back the D1 / G1 / H1 / H2 checks.  Constants are estimated as
squared ratios, i.e. the smallest ``K``, ``L`` with

    |f(x)|^2 + |g(x)|^2 <= K (1 + |x|^2)
    |f(x) - f(y)|^2 + |g(x) - g(y)|^2 <= L |x - y|^2

on the sampled points.  A bounded estimate is evidence, not proof; an
estimate that keeps growing with the sampling radius (or shrinking pair
separation) is flagged.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GROWTH_FACTOR = 10.0  # ratio of estimates across the sweep that counts as divergence
RADII = (1.0, 10.0, 100.0)
SEPARATIONS = (1e-1, 1e-3, 1e-5)


class EvaluationError(ArithmeticError):
    """A model function failed or returned non-finite values."""

    def __init__(self, what: str, x, cause=None):
        self.what = what
        self.x = None if x is None else np.asarray(x, dtype=float)
        msg = f"{what} failed at x={self.x.tolist() if self.x is not None else None}"
        if cause is not None:
            msg += f": {cause}"
        super().__init__(msg)


def evaluate(fn, x, what: str, finite: bool = True):
    """Batched call with per-row retry to name the offending input."""
    try:
        with np.errstate(all="ignore"):
            out = np.asarray(fn(x), dtype=float)
    except Exception as exc:  # noqa: BLE001 - re-raised with the input attached
        for row in x:
            try:
                fn(row[None, :])
            except Exception as inner:  # noqa: BLE001
                raise EvaluationError(what, row, inner) from inner
        raise EvaluationError(what, x[0], exc) from exc
    if finite:
        flat = out.reshape(out.shape[0], -1) if out.ndim else out.reshape(1, -1)
        bad = ~np.all(np.isfinite(flat), axis=1)
        if np.any(bad):
            raise EvaluationError(what, x[int(np.flatnonzero(bad)[0])], "non-finite output")
    return out


def ball(rng: np.random.Generator, m: int, n: int, r: float, center=None) -> np.ndarray:
    """Uniform samples in the closed ball of radius ``r``."""
    d = rng.standard_normal((m, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = d * (r * rng.random((m, 1)) ** (1.0 / n))
    return x if center is None else x + center


def _sq(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return (v.reshape(v.shape[0], -1) ** 2).sum(axis=1)


def _diverges(values) -> bool:
    lo, hi = float(values[0]), float(values[-1])
    return hi > 1e-12 and hi > GROWTH_FACTOR * lo


@dataclass
class Estimate:
    """Growth / Lipschitz estimates of one (drift, diffusion) pair."""

    name: str
    radii: tuple[float, ...]
    growth: tuple[float, ...]
    lipschitz: tuple[float, ...]
    separations: tuple[float, ...]
    local: tuple[float, ...]
    issues: list[str] = field(default_factory=list)

    @property
    def K(self) -> float:
        return self.growth[-1]

    @property
    def L(self) -> float:
        return self.lipschitz[-1]

    @property
    def growth_unbounded(self) -> bool:
        return _diverges(self.growth)

    @property
    def lipschitz_unbounded(self) -> bool:
        return _diverges(self.lipschitz) or self.local_unbounded

    @property
    def local_unbounded(self) -> bool:
        return _diverges(self.local)

    def as_dict(self) -> dict:
        return {
            "name": self.name, "radii": list(self.radii), "K": list(self.growth),
            "L": list(self.lipschitz), "separations": list(self.separations),
            "L_local": list(self.local), "growth_unbounded": self.growth_unbounded,
            "lipschitz_unbounded": self.lipschitz_unbounded,
            "local_unbounded": self.local_unbounded, "issues": list(self.issues),
        }


def estimate(name: str, f, g, dim: int, rng: np.random.Generator, sample_count: int = 10_000,
             radius: float = 1.0, center=None) -> Estimate:
    """Estimate growth and Lipschitz constants of ``f``/``g`` on balls.

    The global sweep uses balls of radius ``radius * (1, 10, 100)``; the
    local sweep uses pairs in the base ball at shrinking separations.
    ``g`` may be ``None`` (no diffusion).
    """
    if dim == 0:
        return Estimate(name, (), (0.0,), (0.0,), (), (0.0,))
    per = max(sample_count // (2 * len(RADII) + len(SEPARATIONS)), 2)
    issues: list[str] = []

    def both(x):
        v = _sq(evaluate(f, x, f"{name} drift")) if f is not None else np.zeros(len(x))
        if g is not None:
            v = v + _sq(evaluate(g, x, f"{name} diffusion"))
        return v

    def diff(x, y):
        v = np.zeros(len(x))
        if f is not None:
            v += _sq(evaluate(f, x, f"{name} drift") - evaluate(f, y, f"{name} drift"))
        if g is not None:
            v += _sq(evaluate(g, x, f"{name} diffusion") - evaluate(g, y, f"{name} diffusion"))
        return v

    growth, lip = [], []
    for scale in RADII:
        r = radius * scale
        x = ball(rng, per, dim, r, center)
        rel = x if center is None else x - center
        growth.append(float(np.max(both(x) / (1.0 + _sq(rel)))))
        y = ball(rng, per, dim, r, center)
        dist = _sq(x - y)
        ok = dist > 0
        lip.append(float(np.max(diff(x[ok], y[ok]) / dist[ok])) if np.any(ok) else 0.0)

    local = []
    for sep in SEPARATIONS:
        x = ball(rng, per, dim, radius, center)
        step = rng.standard_normal((per, dim))
        step *= (sep * radius) / np.linalg.norm(step, axis=1, keepdims=True)
        local.append(float(np.max(diff(x, x + step) / _sq(step))))
    est = Estimate(name, tuple(radius * s for s in RADII), tuple(growth), tuple(lip),
                   tuple(SEPARATIONS), tuple(local), issues)
    return est


def rate_sweep(rate, dim: int, rng: np.random.Generator, sample_count: int = 10_000,
               radius: float = 1.0, center=None, domain=None) -> tuple[list[float], list[str]]:
    """Sup of a rate function on growing balls plus detected problems.

    Rates must be finite and non-negative.  A sup that blows up while the
    samples concentrate near the centre signals a singular rate, which need
    not be integrable along paths.  Growth at large radius is allowed.
    """
    per = max(sample_count // (len(RADII) + len(SEPARATIONS)), 2)
    issues: list[str] = []
    sups = []
    pts = [ball(rng, per, dim, radius * s, center) for s in RADII]
    # concentrated samples near the centre probe singularities
    pts += [ball(rng, per, dim, radius * s, center) for s in SEPARATIONS]
    for x in pts:
        if domain is not None:
            x = x[domain(x)]
            if len(x) == 0:
                sups.append(0.0)
                continue
        with np.errstate(all="ignore"):
            v = np.asarray(rate(x), dtype=float)
        if not np.all(np.isfinite(v)):
            issues.append(f"rate not finite at x={x[np.flatnonzero(~np.isfinite(v))[0]].tolist()}")
            sups.append(np.inf)
            continue
        if np.any(v < 0):
            issues.append(f"negative rate at x={x[np.flatnonzero(v < 0)[0]].tolist()}")
        sups.append(float(v.max()))
    n_big = len(RADII)
    if all(np.isfinite(sups)):
        base = max(sups[0], 1e-300)
        near = max(sups[n_big:])
        if near > 20.0 * base and near > 1e-12:
            issues.append(f"rate sup grows from {sups[0]:.3g} to {near:.3g} near the centre")
    return sups, issues
