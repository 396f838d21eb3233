"""Catalog of named model functions.

Every numeric function works on a batch: a drift maps ``(m, n) -> (m, n)``,
a diffusion ``(m, n) -> (m, n, h)``, a rate ``(m, k) -> (m,)`` and a guard
distance ``(m, k) -> (m,)``.  Guard distances are negative inside the open
set, zero on its boundary.

Models reference these by name plus a parameter block, so a model file
stays declarative and hashable.  Extra functions are added with
:func:`register`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable

import numpy as np


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class FunctionRef:
    name: str
    args: tuple = ()

    def text(self) -> str:
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class ArcLayout:
    """Colour dimensions seen by a firing measure.

    ``in_dims``/``in_kinds`` follow the transition's ordinary and enabling
    input arcs in declaration order; ``out_dims`` its output arcs.
    """

    in_dims: tuple[int, ...]
    in_kinds: tuple[str, ...]
    out_dims: tuple[int, ...]

    @property
    def in_offsets(self) -> tuple[int, ...]:
        return tuple(np.cumsum((0,) + self.in_dims)[:-1].tolist())


@dataclass
class Context:
    dim: int = 0
    brownian_dim: int = 0
    layout: ArcLayout | None = None


# --------------------------------------------------------------------- drift
class ZeroDrift:
    is_zero = True

    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, c):
        return np.zeros_like(c, dtype=float)


class ConstantDrift:
    is_zero = False

    def __init__(self, v):
        self.v = np.asarray(v, dtype=float).reshape(-1)
        self.dim = self.v.size
        self.is_zero = not np.any(self.v)

    def __call__(self, c):
        return np.broadcast_to(self.v, np.shape(c)).copy()


class AffineDrift:
    """``c -> A c + b`` (``b`` may be zero)."""

    is_zero = False

    def __init__(self, A, b=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        if self.A.shape[0] != self.A.shape[1]:
            raise CatalogError(f"drift matrix must be square, got {self.A.shape}")
        self.dim = self.A.shape[0]
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=float).reshape(-1)
        if self.b.size != self.dim:
            raise CatalogError("affine drift offset has wrong length")
        self.is_zero = not (np.any(self.A) or np.any(self.b))

    def __call__(self, c):
        return c @ self.A.T + self.b


# ----------------------------------------------------------------- diffusion
class ConstantDiffusion:
    def __init__(self, W):
        W = np.asarray(W, dtype=float)
        if W.ndim == 0:
            W = W.reshape(1, 1)
        elif W.ndim == 1:
            W = W.reshape(-1, 1)
        self.matrix = W
        self.dim, self.brownian_dim = W.shape
        self.is_zero = not np.any(W)

    def __call__(self, c):
        c = np.atleast_2d(c)
        return np.broadcast_to(self.matrix, (c.shape[0],) + self.matrix.shape)


def zero_diffusion(dim: int, h: int) -> ConstantDiffusion:
    return ConstantDiffusion(np.zeros((dim, h)))


# --------------------------------------------------------------------- guard
class BoxGuard:
    """Open box ``lo < c < hi`` (infinite bounds allowed)."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float).reshape(-1)
        self.hi = np.asarray(hi, dtype=float).reshape(-1)
        if self.lo.shape != self.hi.shape:
            raise CatalogError("box bounds differ in length")
        if np.any(self.lo >= self.hi):
            raise CatalogError("box is empty")
        self.dim = self.lo.size
        self._lo_idx = np.flatnonzero(np.isfinite(self.lo))
        self._hi_idx = np.flatnonzero(np.isfinite(self.hi))
        self.never_hit = self._lo_idx.size == 0 and self._hi_idx.size == 0

    def distance(self, c):
        c = np.atleast_2d(c)
        d = np.full(c.shape[0], -np.inf)
        if self._lo_idx.size:
            d = np.maximum(d, (self.lo[self._lo_idx] - c[:, self._lo_idx]).max(axis=1))
        if self._hi_idx.size:
            d = np.maximum(d, (c[:, self._hi_idx] - self.hi[self._hi_idx]).max(axis=1))
        return d

    def contains(self, c):
        return self.distance(c) < 0


class HalfSpaceGuard:
    """Open half-space ``a . c < b``; distance is Euclidean."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float).reshape(-1)
        norm = np.linalg.norm(self.a)
        if norm == 0:
            raise CatalogError("half-space normal is zero")
        self.b = float(b)
        self._unit = self.a / norm
        self._off = self.b / norm
        self.dim = self.a.size
        self.never_hit = False

    def distance(self, c):
        return np.atleast_2d(c) @ self._unit - self._off

    def contains(self, c):
        return self.distance(c) < 0


class EverywhereGuard:
    """The whole space: an open set without boundary, never hit."""

    never_hit = True

    def __init__(self, dim: int):
        self.dim = dim

    def distance(self, c):
        return np.full(np.atleast_2d(c).shape[0], -np.inf)

    def contains(self, c):
        return np.ones(np.atleast_2d(c).shape[0], dtype=bool)


# ---------------------------------------------------------------------- rate
class ConstantRate:
    """Constant delay / jump rate.

    ``value`` may be a float, a ``Fraction`` or a sympy expression; the
    exact kernel construction keeps it symbolic, simulation needs a number.
    """

    is_constant = True

    def __init__(self, value):
        self.value = value

    def __call__(self, c):
        m = np.atleast_2d(c).shape[0] if np.ndim(c) else 1
        return np.full(m, float(self.value))


def exact(value):
    """Exact arithmetic image of a constant: Fraction for numbers, else as is."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, (float, np.floating)):
        return Fraction(float(value))
    return value


# -------------------------------------------------------------------- firing
@dataclass(frozen=True)
class FiringMeasure:
    """Finite-support firing measure.

    ``sampler(c, u)`` returns ``(e, a)``: the 0/1 vector over output arcs
    and the concatenated colours of the produced tokens.
    ``colour_given(c, e)`` gives ``a`` when colours are a deterministic
    function of ``(c, e)``; ``discrete_probs(c)`` the law of ``e`` over
    ``support``.
    """

    sampler: Callable[[np.ndarray, float], tuple]
    support: tuple[tuple[int, ...], ...]
    discrete_probs: Callable[[np.ndarray], Any] | None = None
    colour_given: Callable[[np.ndarray, tuple], np.ndarray] | None = None
    deterministic: bool = False
    colour_preserving: bool = False
    constant_probs: bool = False
    exact_probs: tuple | None = None  # exact law of e over support, when known
    ref: FunctionRef | None = field(default=None, compare=False)


def _colour_sources(layout: ArcLayout) -> list[int | None]:
    offsets = layout.in_offsets
    sources = []
    for n_out in layout.out_dims:
        if n_out == 0:
            sources.append(None)
            continue
        src = None
        for kind_pref in ("ordinary", "enabling"):
            for j, (n_in, kind) in enumerate(zip(layout.in_dims, layout.in_kinds)):
                if kind == kind_pref and n_in == n_out:
                    src = offsets[j]
                    break
            if src is not None:
                break
        if src is None:
            raise CatalogError(f"no input token of dimension {n_out} to copy a colour from")
        sources.append(src)
    return sources


def _copier(layout: ArcLayout):
    sources = _colour_sources(layout)
    dims = layout.out_dims

    def colour_given(c, e):
        parts = [c[s:s + n] for s, n, ej in zip(sources, dims, e) if ej and n]
        return np.concatenate(parts) if parts else np.zeros(0)

    return colour_given


def dirac_firing(layout: ArcLayout) -> FiringMeasure:
    """One token per output arc, colour copied from the consumed token."""
    e = (1,) * len(layout.out_dims)
    colour_given = _copier(layout)
    return FiringMeasure(
        sampler=lambda c, u: (e, colour_given(c, e)),
        support=(e,),
        discrete_probs=lambda c: np.ones(1),
        colour_given=colour_given,
        deterministic=True,
        colour_preserving=True,
        constant_probs=True,
        exact_probs=(Fraction(1),),
    )


def shift_firing(layout: ArcLayout, v) -> FiringMeasure:
    """Like dirac, but the produced colours are displaced by ``v``."""
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != sum(layout.out_dims):
        raise CatalogError("shift vector must match the produced colour dimension")
    e = (1,) * len(layout.out_dims)
    copy = _copier(layout)

    def colour_given(c, e_):
        return copy(c, e_) + v

    return FiringMeasure(
        sampler=lambda c, u: (e, colour_given(c, e)),
        support=(e,),
        discrete_probs=lambda c: np.ones(1),
        colour_given=colour_given,
        deterministic=True,
        colour_preserving=not np.any(v),
        constant_probs=True,
        exact_probs=(Fraction(1),),
    )


def choice_firing(layout: ArcLayout, weights) -> FiringMeasure:
    """Exactly one output arc gets a token, chosen with ``weights``.

    With one extra trailing weight, that weight is the probability that no
    token is produced at all.
    """
    w = [exact(x) for x in np.asarray(weights, dtype=object).reshape(-1)]
    n_out = len(layout.out_dims)
    if len(w) not in (n_out, n_out + 1):
        raise CatalogError("choice needs one weight per output arc (plus optional 'none')")
    total = sum(w)
    probs = [x / total for x in w]
    support = [tuple(int(i == j) for i in range(n_out)) for j in range(n_out)]
    if len(w) == n_out + 1:
        support.append((0,) * n_out)
    support = tuple(support)
    fprobs = np.array([float(p) for p in probs])
    cum = np.cumsum(fprobs)
    cum[-1] = 1.0
    copy = _copier(layout)

    def sampler(c, u):
        k = int(np.searchsorted(cum, u, side="right"))
        e = support[min(k, len(support) - 1)]
        return e, copy(c, e)

    return FiringMeasure(
        sampler=sampler,
        support=support,
        discrete_probs=lambda c: fprobs.copy(),
        colour_given=copy,
        deterministic=False,
        colour_preserving=True,
        constant_probs=True,
        exact_probs=tuple(probs),
    )


# ------------------------------------------------------------ initial colour
class FixedColour:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float).reshape(-1)
        self.dim = self.v.size

    def __call__(self, rng):
        return self.v.copy()


class NormalColour:
    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=float).reshape(-1)
        self.std = np.broadcast_to(np.asarray(std, dtype=float), self.mean.shape).copy()
        self.dim = self.mean.size

    def __call__(self, rng):
        return self.mean + self.std * rng.standard_normal(self.dim)


# ------------------------------------------------------------------ registry
def _drift_zero(ctx):
    return ZeroDrift(ctx.dim)


def _drift_constant(ctx, v):
    return ConstantDrift(v)


def _drift_linear(ctx, A):
    return AffineDrift(A)


def _drift_affine(ctx, A, b):
    return AffineDrift(A, b)


def _diff_zero(ctx):
    return zero_diffusion(ctx.dim, ctx.brownian_dim)


def _diff_constant(ctx, W):
    return ConstantDiffusion(W)


def _guard_box(ctx, lo, hi):
    return BoxGuard(lo, hi)


def _guard_halfspace(ctx, a, b):
    return HalfSpaceGuard(a, b)


def _guard_everywhere(ctx):
    return EverywhereGuard(ctx.dim)


def _rate_const(ctx, value):
    return ConstantRate(value)


def _firing_dirac(ctx):
    return dirac_firing(ctx.layout)


def _firing_shift(ctx, v):
    return shift_firing(ctx.layout, v)


def _firing_choice(ctx, w):
    return choice_firing(ctx.layout, w)


def _colour_fixed(ctx, v):
    return FixedColour(v)


def _colour_normal(ctx, mean, std):
    return NormalColour(mean, std)


_CATALOG: dict[str, dict[str, Callable]] = {
    "drift": {"zero": _drift_zero, "constant": _drift_constant,
              "linear": _drift_linear, "affine": _drift_affine},
    "diffusion": {"zero": _diff_zero, "constant": _diff_constant},
    "guard": {"box": _guard_box, "halfspace": _guard_halfspace, "everywhere": _guard_everywhere},
    "rate": {"const": _rate_const},
    "firing": {"dirac": _firing_dirac, "shift": _firing_shift, "choice": _firing_choice},
    "colour": {"fixed": _colour_fixed, "normal": _colour_normal},
}


def register(kind: str, name: str, factory: Callable) -> None:
    """Add ``factory(ctx, *args)`` to the catalog under ``kind``/``name``."""
    if kind not in _CATALOG:
        raise CatalogError(f"unknown function kind {kind!r}")
    _CATALOG[kind][name] = factory


def known(kind: str, name: str) -> bool:
    return name in _CATALOG.get(kind, {})


def make(kind: str, ref: FunctionRef, values: list, ctx: Context):
    """Instantiate catalog entry ``ref`` with resolved argument ``values``."""
    try:
        factory = _CATALOG[kind][ref.name]
    except KeyError:
        raise CatalogError(f"unknown {kind} function {ref.name!r}") from None
    try:
        obj = factory(ctx, *values)
    except TypeError as exc:
        raise CatalogError(f"{kind} function {ref.name!r}: {exc}") from None
    try:
        object.__setattr__(obj, "ref", ref)
    except (AttributeError, TypeError):
        pass
    return obj
