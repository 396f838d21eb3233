"""General stochastic hybrid systems (hybrid automata with spontaneous and
forced jumps) and their construction from SDCPN models."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
import sympy

from . import conditions
from ._hybrid import HybridEngine, run_batch
from .core import BatchResult, HybridPath, ModeId, RandomBasis, SolverParams
from .functions import ConstantDiffusion, exact
from .sdcpn_exec import (ClosureError, EnablingCandidate, Marking, _selection_table,
                         candidate_colour, conflict_options, fire, immediate_closure, pre_enabled,
                         resolve_conflicts)
from .sdcpn_model import ModelError, SdcpnModel, validate


class MappingError(ValueError):
    pass


class ReachabilityError(MappingError):
    pass


# ------------------------------------------------------------ mode fields
class BlockDrift:
    """Drift of a stacked state: each block evolves with its own field."""

    def __init__(self, blocks, n):
        self.blocks = blocks  # list of (slice, drift)
        self.dim = n
        self.is_zero = all(getattr(f, "is_zero", False) for _, f in blocks)

    def __call__(self, x):
        out = np.zeros_like(x, dtype=float)
        for sl, f in self.blocks:
            out[:, sl] = f(x[:, sl])
        return out


class BlockDiffusion:
    def __init__(self, blocks, n, h):
        self.blocks = blocks  # list of (row slice, column slice, diffusion)
        self.dim, self.brownian_dim = n, h
        self.is_zero = all(getattr(g, "is_zero", False) for *_, g in blocks)

    def __call__(self, x):
        x = np.atleast_2d(x)
        out = np.zeros((x.shape[0], self.dim, self.brownian_dim))
        for rs, cs, g in self.blocks:
            out[:, rs, cs] = g(x[:, rs])
        return out


class ModeRate:
    """Jump rate of one mode: sum of per-candidate rates on colour blocks."""

    def __init__(self, terms):
        self.terms = terms  # list of (rate, index array)
        self.is_constant = all(getattr(r, "is_constant", False) for r, _ in terms)
        self.value = _exact_sum([exact(r.value) for r, _ in terms]) if self.is_constant else None

    def parts(self, x):
        x = np.atleast_2d(x)
        if not self.terms:
            return np.zeros((x.shape[0], 0))
        return np.stack([np.asarray(r(x[:, idx]), dtype=float) for r, idx in self.terms], axis=1)

    def __call__(self, x):
        x = np.atleast_2d(x)
        if self.is_constant:
            return np.full(x.shape[0], float(self.value))
        return self.parts(x).sum(axis=1)


class ConstRate:
    is_constant = True

    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        return np.full(np.atleast_2d(x).shape[0], float(self.value))


class IntersectionDomain:
    """Intersection of guard sets, each seen through a colour selection."""

    never_hit = False

    def __init__(self, parts, dim):
        self.parts = parts  # list of (guard, index array)
        self.dim = dim

    def distance(self, x):
        x = np.atleast_2d(x)
        d = np.full(x.shape[0], -np.inf)
        for guard, idx in self.parts:
            d = np.maximum(d, guard.distance(x[:, idx]))
        return d

    def contains(self, x):
        return self.distance(x) < 0

    def describe(self):
        return [{"guard": _ref_text(g), "coords": [int(i) for i in idx]} for g, idx in self.parts]


def _ref_text(obj):
    ref = getattr(obj, "ref", None)
    return ref.text() if ref is not None else type(obj).__name__


def _exact_sum(values):
    total = Fraction(0)
    for v in values:
        total = _add(total, v)
    return total


def _add(a, b):
    if isinstance(a, sympy.Basic) or isinstance(b, sympy.Basic):
        return sympy.sympify(_sym(a) + _sym(b))
    return a + b


def _sym(v):
    if isinstance(v, Fraction):
        return sympy.Rational(v.numerator, v.denominator)
    return v


def _div(a, b):
    if isinstance(a, sympy.Basic) or isinstance(b, sympy.Basic):
        return sympy.cancel(_sym(a) / _sym(b))
    return Fraction(a) / Fraction(b)


def _mul(a, b):
    if isinstance(a, sympy.Basic) or isinstance(b, sympy.Basic):
        return sympy.cancel(_sym(a) * _sym(b))
    return a * b


def is_one(v) -> bool:
    if isinstance(v, sympy.Basic):
        return sympy.simplify(v - 1) == 0
    return v == 1


def is_zero(v) -> bool:
    if isinstance(v, sympy.Basic):
        return sympy.simplify(v) == 0
    return v == 0


# ------------------------------------------------------------------ kernel
class JumpKernel:
    """Post-jump law of a hybrid automaton.

    ``sampler(theta, x, boundary, rng) -> (theta', x')`` is always
    available.  ``spontaneous`` (an N x N list of exact entries) and
    ``boundary`` (per mode an exact row, or ``None`` for modes without a
    boundary) are present when the law is x-independent and the continuous
    state is kept; then sampling is vectorized.
    """

    def __init__(self, n_modes: int, sampler: Callable | None = None, spontaneous=None,
                 boundary=None, preserving: bool = False):
        self.n = n_modes
        self.sampler = sampler
        self.spontaneous = spontaneous
        self.boundary = boundary
        self.preserving = preserving and spontaneous is not None
        self._cum_s = self._cum(spontaneous) if self.preserving else None
        rows = None
        if self.preserving and boundary is not None:
            rows = [r if r is not None else [Fraction(int(i == k)) for i in range(n_modes)]
                    for k, r in enumerate(boundary)]
        self._cum_b = self._cum(rows) if rows is not None else None
        if sampler is None and self._cum_s is None:
            raise ValueError("a kernel needs a sampler or numeric exact matrices")

    @staticmethod
    def _cum(rows):
        if rows is None:
            return None
        try:
            P = np.array([[float(v) for v in row] for row in rows])
        except TypeError:
            return None  # symbolic entries
        cum = np.cumsum(P, axis=1)
        tot = cum[:, -1:]
        return np.where(tot > 0, cum / np.where(tot > 0, tot, 1.0), 1.0)

    def sample(self, theta: int, x, boundary: bool, rng: np.random.Generator):
        th, X = self.sample_batch(np.array([theta]), np.atleast_2d(x), boundary, rng)
        return int(th[0]), X[0]

    def sample_batch(self, theta, X, boundary: bool, rng: np.random.Generator):
        cum = self._cum_b if boundary else self._cum_s
        if cum is not None:
            u = rng.random(len(theta))
            new = (cum[theta] <= u[:, None]).sum(axis=1)
            return np.minimum(new, self.n - 1), X
        if self.sampler is None:
            raise MappingError("kernel has no sampler for this jump")
        out_th = np.empty(len(theta), dtype=np.int64)
        out_x = []
        for i in range(len(theta)):
            t2, x2 = self.sampler(int(theta[i]), X[i], boundary, rng)
            out_th[i] = t2
            out_x.append(np.asarray(x2, dtype=float))
        width = max((len(x) for x in out_x), default=0)
        Xn = np.zeros((len(theta), max(width, X.shape[1] if X.ndim == 2 else 0)))
        for i, x in enumerate(out_x):
            Xn[i, :len(x)] = x
        return out_th, Xn

    def row_sums(self):
        sums = {}
        if self.spontaneous is not None:
            sums["spontaneous"] = [_simplify(_exact_sum(r)) for r in self.spontaneous]
        if self.boundary is not None:
            sums["boundary"] = [None if r is None else _simplify(_exact_sum(r)) for r in self.boundary]
        return sums


def _simplify(v):
    return sympy.simplify(v) if isinstance(v, sympy.Basic) else v


# ------------------------------------------------------------------- model
@dataclass
class GshsModel:
    modes: list[ModeId]
    dims: list[int]
    f: list
    g: list
    domains: list
    rates: list
    kernel: JumpKernel
    init: Callable  # rng -> (theta, x)
    init_batch_fn: Callable | None = None
    name: str = "gshs"
    source_hash: str | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def brownian(self):
        out = []
        for g, d in zip(self.g, self.dims):
            W = getattr(g, "matrix", None)
            out.append(W.shape[1] if W is not None else getattr(g, "brownian_dim", 0))
        return out

    def mode_index(self, label) -> int:
        for m in self.modes:
            if m.label == label or m.name == label or m.index == label:
                return m.index
        raise KeyError(label)

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

    def spontaneous_sample(self, theta, X, rng):
        return self.kernel.sample_batch(theta, X, False, rng)

    def boundary_sample(self, theta, X, rng):
        return self.kernel.sample_batch(theta, X, True, rng)


class _GshsEngine(HybridEngine):
    kind = "gshs"

    def on_start(self):
        m = self.model
        self.const = np.array([getattr(r, "is_constant", False) for r in m.rates])
        self.lam = np.array([float(r.value) if self.const[k] else np.nan for k, r in enumerate(m.rates)])
        self.acc = np.zeros(self.R)
        self.target = np.zeros(self.R)
        self._prev = None

    def reset_clocks(self, idx, now):
        e = -np.log1p(-self.ujump.random(len(idx)))
        self.target[idx] = e
        self.acc[idx] = 0.0
        th = self.theta[idx]
        lam = self.lam[th]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_exp = np.where(self.const[th] & (lam > 0), now + e / np.where(lam > 0, lam, 1.0), np.inf)
        self.next_sched[idx] = t_exp

    def hazard(self, act, h, Xprev):
        self._prev = None
        if self.const.all():
            return None
        s = np.full(self.R, math.inf)
        rows_all, acc0_all, inc_all = [], [], []
        for k in np.flatnonzero(~self.const):
            rows = np.flatnonzero(act & (self.theta == k))
            if rows.size == 0:
                continue
            d = self.dims[k]
            lam = np.asarray(self.model.rates[k](Xprev[rows, :d]), dtype=float)
            bad = ~(np.isfinite(lam) & (lam >= 0))
            if bad.any():
                self.fail(rows[bad], "jump rate not finite and non-negative")
                lam = np.where(bad, 0.0, lam)
            inc = lam * h[rows]
            acc0 = self.acc[rows].copy()
            self.acc[rows] = acc0 + inc
            hit = acc0 + inc >= self.target[rows]
            with np.errstate(divide="ignore", invalid="ignore"):
                s[rows[hit]] = np.clip((self.target[rows[hit]] - acc0[hit]) / inc[hit], 0.0, 1.0)
            rows_all.append(rows)
            acc0_all.append(acc0)
            inc_all.append(inc)
        if rows_all:
            self._prev = (np.concatenate(rows_all), np.concatenate(acc0_all), np.concatenate(inc_all))
        return s

    def rollback_hazard(self, idx, s):
        if self._prev is None:
            return
        rows, acc0, inc = self._prev
        pos = {int(r): i for i, r in enumerate(rows)}
        for r, si in zip(idx, s):
            i = pos.get(int(r))
            if i is not None:
                self.acc[r] = acc0[i] + si * inc[i]

    def scheduled(self, idx):
        th, X = self.model.spontaneous_sample(self.theta[idx], self.X[idx], self.ujump)
        self.set_state(idx, th, X)
        return idx

    def apply(self, idx, kind, sampled=False, th=None, X=None):
        super().apply(idx, kind, sampled, th, X)


def simulate_gshs(model: GshsModel, horizon: float, params: SolverParams | None = None,
                  basis: RandomBasis | None = None, seed: int = 0) -> HybridPath:
    """One execution of the automaton over ``[0, horizon]``."""
    params = params or SolverParams()
    basis = basis if basis is not None else RandomBasis(seed)
    res = run_batch(_GshsEngine, model, horizon, params, basis, 1, horizon, record_paths=True,
                    raise_errors=True)
    return res.paths[0]


def simulate_gshs_batch(model: GshsModel, horizon: float, params: SolverParams, basis: RandomBasis,
                        reps: int, grid_step: float, record_paths: bool = False) -> BatchResult:
    return run_batch(_GshsEngine, model, horizon, params, basis, reps, grid_step, record_paths)


# ------------------------------------------------------------ reachability
@dataclass
class ReachabilityGraph:
    nodes: list[tuple[int, ...]]
    edges: list[tuple[int, int, str, tuple[int, ...]]]
    initial: int = 0

    def successors(self, i):
        return [(j, t, e) for a, j, t, e in self.edges if a == i]


def _immediate_enabled(sdcpn: SdcpnModel, counts) -> bool:
    return any(t.kind == "immediate" for t, _ in _selection_table(sdcpn, tuple(counts)))


def reachability_graph(sdcpn: SdcpnModel, max_nodes: int = 10_000,
                       respect_priority: bool = False) -> ReachabilityGraph:
    """Count-vector reachability graph over all transitions and e-vectors.

    With ``respect_priority`` only immediate transitions are expanded from
    nodes where one is enabled.
    """
    start = sdcpn.initial_counts()
    nodes = [start]
    index = {start: 0}
    edges = []
    queue = deque([start])
    while queue:
        counts = queue.popleft()
        i = index[counts]
        table = _selection_table(sdcpn, counts)
        if respect_priority and any(t.kind == "immediate" for t, _ in table):
            table = [(t, s) for t, s in table if t.kind == "immediate"]
        for t, _ in table:
            s = sdcpn.arcs_of(t.id)
            base = list(counts)
            for p in s.consumed:
                base[p] -= 1
            for e in sdcpn.firing(t.id).support:
                new = list(base)
                for ej, p in zip(e, s.outputs):
                    new[p] += ej
                new = tuple(new)
                if new not in index:
                    if len(nodes) >= max_nodes:
                        raise ReachabilityError(f"reachability graph not finite within budget "
                                                f"({max_nodes} nodes)")
                    index[new] = len(nodes)
                    nodes.append(new)
                    queue.append(new)
                edges.append((i, index[new], t.id, tuple(e)))
    return ReachabilityGraph(nodes, edges, 0)


# ----------------------------------------------------------------- mapping
class _RngBasis:
    """RandomBasis look-alike over a single generator."""

    def __init__(self, rng):
        self.rng = rng

    def declare(self, *names):
        return self

    def stream(self, name):
        return self.rng

    def uniform(self, name="uniform"):
        return float(self.rng.random())


@dataclass
class _ModeInfo:
    counts: tuple[int, ...]
    layout: list  # (place, position, slice)
    dim: int
    delay: list   # (transition, index array, token positions)
    guards: list  # (transition, index array, token positions)


def _layout(sdcpn: SdcpnModel, counts):
    out, off = [], 0
    for p, n in enumerate(counts):
        d = sdcpn.places[p].colour_dim
        for i in range(n):
            out.append((p, i, slice(off, off + d)))
            off += d
    return out, off


def _marking(sdcpn: SdcpnModel, info: _ModeInfo, x) -> Marking:
    m = Marking(sdcpn.dims)
    for p, i, sl in info.layout:
        m.add_token(p, x[sl] if sl.stop > sl.start else None)
    return m


def _selection_index(info: _ModeInfo, sdcpn, sel):
    idx = []
    pos = {(p, i): sl for p, i, sl in info.layout}
    for p, i in sel:
        sl = pos[(p, i)]
        idx.extend(range(sl.start, sl.stop))
    return np.array(idx, dtype=np.int64)


class SdcpnKernel:
    """Monte Carlo post-jump sampler composing competing clocks or the hit
    guard, the firing measure and immediate closure on the source net."""

    def __init__(self, sdcpn, infos, index_of, params: SolverParams):
        self.sdcpn = sdcpn
        self.infos = infos
        self.index_of = index_of
        self.params = params

    def __call__(self, theta, x, boundary, rng):
        sd = self.sdcpn
        info = self.infos[theta]
        m = _marking(sd, info, np.asarray(x, dtype=float))
        basis = _RngBasis(rng)
        cands = pre_enabled(sd, m, kinds=("guard", "delay"))
        by_key = {}
        for c in cands:
            by_key.setdefault(c.transition, []).append(c)
        if boundary:
            enabled = []
            best = None
            for t, idx, sel in info.guards:
                c = self._cand(m, t, sel)
                d = float(t.guard.distance(c.colour[None, :])[0])
                if d >= -self.params.guard_tol:
                    enabled.append(c)
                if best is None or d > best[0]:
                    best = (d, c)
            if not enabled and best is not None:
                enabled = [best[1]]
            if not enabled:
                raise MappingError(f"boundary jump requested in mode {theta} without guards")
            enabled = [type(c)(c.transition, c.tokens, c.colour, "guard-hit") for c in enabled]
        else:
            if not info.delay:
                raise MappingError(f"spontaneous jump requested in mode {theta} with zero rate")
            rates = np.array([float(t.delay_rate(x[idx][None, :])[0]) for t, idx, _ in info.delay])
            tot = rates.sum()
            if not tot > 0:
                raise MappingError(f"spontaneous jump with zero total rate in mode {theta}")
            k = min(int(np.searchsorted(np.cumsum(rates) / tot, rng.random(), side="right")),
                    len(rates) - 1)
            t, idx, sel = info.delay[k]
            c = self._cand(m, t, sel)
            enabled = [type(c)(c.transition, c.tokens, c.colour, "delay-expiry")]
        plan = resolve_conflicts(sd, enabled, basis)
        fire(sd, m, plan, basis)
        immediate_closure(sd, m, basis, self.params.max_immediate)
        counts = m.counts
        if counts not in self.index_of:
            raise MappingError(f"jump leads to marking {counts} outside the mode set")
        return self.index_of[counts], m.state_vector()

    @staticmethod
    def _cand(m, t, sel):
        tokens = tuple(m.tokens[p][i] for p, i in sel)
        return EnablingCandidate(t.id, tokens, candidate_colour(None, m, tokens))


class _NotExact(Exception):
    pass


def _fire_outcomes(sdcpn, marking, plan):
    """Exact outcomes of firing ``plan``: list of (probability, marking)."""
    colours = [np.concatenate([marking.colour(t) for t in c.tokens]) if c.tokens else np.zeros(0)
               for c in plan]
    per = []
    for c, col in zip(plan, colours):
        fm = sdcpn.firing(c.transition)
        if fm.colour_given is None:
            raise _NotExact(f"{c.transition}: colours of produced tokens are random")
        probs = fm.exact_probs
        if probs is None:
            if len(fm.support) != 1:
                raise _NotExact(f"{c.transition}: firing law is not exact")
            probs = (Fraction(1),)
        per.append([(p, e) for p, e in zip(probs, fm.support) if not is_zero(p)])
    out = []
    for combo in _product(per):
        m = marking.copy()
        prob = Fraction(1)
        for c in plan:
            s = sdcpn.arcs_of(c.transition)
            for tid, p, kind in zip(c.tokens, s.inputs, s.input_kinds):
                if kind == "ordinary":
                    m.remove_token(p, tid)
        for c, col, (p_e, e) in zip(plan, colours, combo):
            prob = _mul(prob, p_e)
            s = sdcpn.arcs_of(c.transition)
            a = np.asarray(sdcpn.firing(c.transition).colour_given(col, e), dtype=float)
            off = 0
            for ej, p in zip(e, s.outputs):
                if ej:
                    n = sdcpn.places[p].colour_dim
                    m.add_token(p, a[off:off + n])
                    off += n
        out.append((prob, m))
    return out


def _product(lists):
    if not lists:
        yield ()
        return
    for head in lists[0]:
        for rest in _product(lists[1:]):
            yield (head,) + rest


def _closure_outcomes(sdcpn, marking, prob, budget):
    enabled = pre_enabled(sdcpn, marking, kinds=("immediate",))
    if not enabled:
        return [(prob, marking)]
    if budget <= 0:
        raise ClosureError(f"immediate-transition cycle from marking {marking.counts}")
    options = conflict_options(sdcpn, enabled)
    out = []
    share = Fraction(1, len(options))
    for plan in options:
        for p, m in _fire_outcomes(sdcpn, marking, plan):
            out += _closure_outcomes(sdcpn, m, _mul(_mul(prob, share), p), budget - 1)
    return out


def _merge(row_terms, n):
    row = [Fraction(0)] * n
    for j, p in row_terms:
        row[j] = _add(row[j], p)
    return [_simplify(v) if isinstance(v, sympy.Basic) else v for v in row]


def _exact_rows(sdcpn, infos, index_of, max_immediate, rng):
    """Exact spontaneous and boundary rows; ``None`` when x-dependent or
    when jumps change the continuous state."""
    n = len(infos)
    spont, bound = [], []
    for k, info in enumerate(infos):
        probe = rng.standard_normal(info.dim)
        m = _marking(sdcpn, info, probe)
        # spontaneous part
        if not info.delay:
            spont.append([Fraction(int(j == k)) for j in range(n)])
        else:
            rates = []
            for t, idx, sel in info.delay:
                if not getattr(t.delay_rate, "is_constant", False):
                    raise _NotExact(f"rate of {t.id} depends on the colour")
                rates.append(exact(t.delay_rate.value))
            lam = _exact_sum(rates)
            if is_zero(lam):
                spont.append([Fraction(int(j == k)) for j in range(n)])
            else:
                terms = []
                for (t, idx, sel), r in zip(info.delay, rates):
                    c = SdcpnKernel._cand(m, t, sel)
                    for p, m2 in _fire_outcomes(sdcpn, m, [c]):
                        for q, m3 in _closure_outcomes(sdcpn, m2, p, max_immediate):
                            terms.append((_target(m3, probe, index_of), _mul(_div(r, lam), q)))
                spont.append(_merge(terms, n))
        # boundary part: one row when a single guard can be hit
        if not info.guards:
            bound.append(None)
            continue
        outcomes = []
        for t, idx, sel in info.guards:
            c = SdcpnKernel._cand(m, t, sel)
            terms = []
            for p, m2 in _fire_outcomes(sdcpn, m, [c]):
                for q, m3 in _closure_outcomes(sdcpn, m2, p, max_immediate):
                    terms.append((_target(m3, probe, index_of), q))
            outcomes.append(_merge(terms, n))
        if any(o != outcomes[0] for o in outcomes[1:]):
            raise _NotExact("boundary law depends on which guard is hit")
        bound.append(outcomes[0])
    return spont, bound


def _target(marking, probe, index_of):
    counts = marking.counts
    if counts not in index_of:
        raise MappingError(f"jump leads to marking {counts} outside the mode set")
    x = marking.state_vector()
    if x.shape != probe.shape or not np.array_equal(x, probe):
        raise _NotExact("jump changes the continuous state")
    return index_of[counts]


def _stack_fields(sdcpn, info):
    blocks, dblocks = [], []
    col = 0
    for p, i, sl in info.layout:
        place = sdcpn.places[p]
        if place.colour_dim == 0:
            continue
        blocks.append((sl, place.drift))
        h = place.brownian_dim
        dblocks.append((sl, slice(col, col + h), place.diffusion))
        col += h
    n = info.dim
    if len(blocks) == 1 and blocks[0][0] == slice(0, n):
        return blocks[0][1], dblocks[0][2]
    if not blocks:
        return None, None
    f = BlockDrift(blocks, n)
    if all(getattr(g, "matrix", None) is not None for *_, g in dblocks):
        W = np.zeros((n, col))
        for rs, cs, g in dblocks:
            W[rs, cs] = g.matrix
        return f, ConstantDiffusion(W)
    return f, BlockDiffusion(dblocks, n, col)


def map_sdcpn_to_gshs(sdcpn: SdcpnModel, max_nodes: int = 10_000,
                      params: SolverParams | None = None) -> GshsModel:
    """Hybrid automaton equivalent to ``sdcpn``.

    Modes are the reachable markings that enable no immediate transition;
    named markings of the net come first, in declaration order.
    """
    problems = validate(sdcpn)
    if problems:
        raise ModelError("invalid model: " + "; ".join(str(v) for v in problems))
    params = params or SolverParams()
    graph = reachability_graph(sdcpn, max_nodes)
    K = [c for c in graph.nodes if not _immediate_enabled(sdcpn, c)]
    if not K:
        raise MappingError("every reachable marking enables an immediate transition "
                           "(immediate-transition cycle); there is no mode to dwell in")
    named = [tuple(v) for v in sdcpn.modes.values() if tuple(v) in set(K)]
    order = named + [c for c in K if c not in set(named)]
    index_of = {c: i for i, c in enumerate(order)}

    infos, modes, f, g, domains, rates = [], [], [], [], [], []
    for i, counts in enumerate(order):
        layout, dim = _layout(sdcpn, counts)
        info = _ModeInfo(counts, layout, dim, [], [])
        for t, sels in _selection_table(sdcpn, counts):
            if t.kind == "immediate":
                continue
            for sel in sels:
                idx = _selection_index(info, sdcpn, sel)
                if t.kind == "delay":
                    info.delay.append((t, idx, sel))
                elif not getattr(t.guard, "never_hit", False):
                    info.guards.append((t, idx, sel))
        infos.append(info)
        modes.append(ModeId(i, counts, sdcpn.mode_name(counts)))
        fi, gi = _stack_fields(sdcpn, info)
        f.append(fi)
        g.append(gi)
        domains.append(IntersectionDomain([(t.guard, idx) for t, idx, _ in info.guards], dim)
                       if info.guards else None)
        rates.append(ModeRate([(t.delay_rate, idx) for t, idx, _ in info.delay]))

    spont = bound = None
    reason = None
    try:
        spont, bound = _exact_rows(sdcpn, infos, index_of, params.max_immediate,
                                   np.random.default_rng(20240607))
    except _NotExact as exc:
        reason = str(exc)
    kernel = JumpKernel(len(order), SdcpnKernel(sdcpn, infos, index_of, params), spont, bound,
                        preserving=spont is not None)

    def init(rng):
        basis = _RngBasis(rng)
        m = Marking.from_colours(sdcpn, sdcpn.initial.sample(sdcpn, rng))
        immediate_closure(sdcpn, m, basis, params.max_immediate)
        if m.counts not in index_of:
            raise MappingError(f"initial marking {m.counts} is not a mode")
        return index_of[m.counts], m.state_vector()

    model = GshsModel(modes, [i.dim for i in infos], f, g, domains, rates, kernel, init,
                      _fixed_init_batch(sdcpn, infos, index_of, params), name=sdcpn.name,
                      source_hash=sdcpn.source_hash,
                      metadata={"exact_kernel": spont is not None, "inexact_reason": reason,
                                "graph_nodes": len(graph.nodes)})
    model.sdcpn = sdcpn
    model.infos = infos
    model.graph = graph
    return model


def _fixed_init_batch(sdcpn, infos, index_of, params):
    """Vectorized initial law when initial colours are fixed and closure is exact."""
    from .functions import FixedColour
    init = sdcpn.initial
    if init.joint is not None:
        return None
    if not all(isinstance(s, FixedColour) for ss in init.colours.values() for s in ss):
        return None
    m = Marking.from_colours(sdcpn, init.sample(sdcpn, np.random.default_rng(0)))
    try:
        outcomes = _closure_outcomes(sdcpn, m, Fraction(1), params.max_immediate)
        probs = np.array([float(p) for p, _ in outcomes])
    except (_NotExact, TypeError):
        return None
    targets = []
    for _, m2 in outcomes:
        if m2.counts not in index_of:
            return None
        targets.append((index_of[m2.counts], m2.state_vector()))
    cum = np.cumsum(probs) / probs.sum()

    def batch(rng, reps):
        if len(targets) == 1:
            k = np.zeros(reps, dtype=np.int64)
        else:
            k = np.minimum((cum[None, :] <= rng.random(reps)[:, None]).sum(axis=1), len(targets) - 1)
        th = np.array([targets[i][0] for i in k], dtype=np.int64)
        return th, [targets[i][1] for i in k]

    return batch


# ----------------------------------------------------------------- checks
@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    issues: list = field(default_factory=list)

    def as_dict(self):
        return {"name": self.name, "passed": self.passed, "issues": list(self.issues),
                "details": self.details}


def _sample_in_domain(rng, model, k, m, radius=1.0, center=None):
    d = model.dims[k]
    if d == 0:
        return np.zeros((m, 0))
    x = conditions.ball(rng, 4 * m, d, radius, center)
    dom = model.domains[k]
    if dom is not None and not getattr(dom, "never_hit", False):
        x = x[dom.distance(x) < 0]
        if len(x) == 0 and center is None:
            return _sample_in_domain(rng, model, k, m, radius, _interior_point(model, k, rng))
    return x[:m]


def _interior_point(model, k, rng):
    """A point of the mode domain found from the initial law or by search."""
    dom = model.domains[k]
    th, X = model.init_batch(rng, 64)
    for t, x in zip(th, X):
        if t == k and dom.distance(np.atleast_2d(x))[0] < 0:
            return np.asarray(x, dtype=float)
    for r in (1.0, 10.0, 100.0):
        x = conditions.ball(rng, 1000, model.dims[k], r)
        ok = dom.distance(x) < 0
        if ok.any():
            return x[np.flatnonzero(ok)[0]]
    return np.zeros(model.dims[k])


def growth_lipschitz(model, budget, rng, local_only=False):
    per = max(budget // max(len(model.modes), 1), 100)
    out = {}
    for k, m in enumerate(model.modes):
        out[str(m)] = conditions.estimate(str(m), model.f[k], model.g[k], model.dims[k], rng,
                                          sample_count=per)
    return out


def check_g1_g4(model: GshsModel, budget: int = 100_000, seed: int = 0,
                pilot_reps: int = 200, pilot_horizon: float = 2.0) -> dict[str, CheckResult]:
    """Falsification checks of the automaton assumptions G1-G4.

    G1 is tested as global Lipschitz continuity plus linear growth of the
    mode fields; G2 looks for rates that are infinite, negative or blow up
    near a point; G3 validates kernel samples and exact row sums; G4 runs
    pilot simulations and flags exhausted jump budgets or jump counts that
    grow faster than linearly with the horizon.
    """
    rng = np.random.default_rng(seed)
    report = {}
    est = growth_lipschitz(model, budget // 2, rng)
    bad = [name for name, e in est.items() if e.growth_unbounded or e.lipschitz_unbounded]
    report["G1"] = CheckResult("G1", not bad, {k: e.as_dict() for k, e in est.items()},
                               [f"mode {b}: growth or Lipschitz estimate diverges" for b in bad])

    issues, details = [], {}
    per = max(budget // (4 * max(len(model.modes), 1)), 100)
    for k, m in enumerate(model.modes):
        if model.dims[k] == 0:
            continue
        sups, iss = conditions.rate_sweep(model.rates[k], model.dims[k], rng, per)
        details[str(m)] = sups
        issues += [f"mode {m}: {s}" for s in iss]
    report["G2"] = CheckResult("G2", not issues, details, issues)

    issues = []
    sums = model.kernel.row_sums()
    for kind, rows in sums.items():
        for k, s in enumerate(rows):
            if s is not None and not is_one(s):
                issues.append(f"{kind} row of mode {model.modes[k]} sums to {s}")
    n_draws = max(budget // (4 * max(len(model.modes), 1)), 50)
    for k, m in enumerate(model.modes):
        x = _sample_in_domain(rng, model, k, 8)
        if len(x) == 0:
            continue
        kinds = [False] + ([True] if model.domains[k] is not None else [])
        for boundary in kinds:
            if not boundary and model.rates[k].is_constant and is_zero(model.rates[k].value):
                continue
            X = np.repeat(x, int(math.ceil(n_draws / len(x))), axis=0)[:n_draws]
            try:
                th, Xn = model.kernel.sample_batch(np.full(len(X), k), X, boundary, rng)
            except Exception as exc:  # noqa: BLE001 - a failing kernel is a finding
                issues.append(f"mode {m}: kernel sampler failed: {exc}")
                continue
            th = np.asarray(th)
            invalid = (th < 0) | (th >= len(model.modes))
            if invalid.any():
                issues.append(f"mode {m}: {invalid.mean():.3f} of {'boundary' if boundary else 'spontaneous'} "
                              "jumps lead outside the mode set")
                continue
            if not np.all(np.isfinite(Xn)):
                issues.append(f"mode {m}: non-finite post-jump states")
    report["G3"] = CheckResult("G3", not issues, {"row_sums": {k: [str(v) for v in r]
                                                               for k, r in sums.items()}}, issues)
    report["G4"] = pilot_jump_check(simulate_gshs_batch, model, pilot_reps, pilot_horizon, seed)
    return report


def pilot_jump_check(batch_fn, model, reps, horizon, seed, name="G4", max_jumps=2_000):
    params = SolverParams(dt=min(1e-2, horizon / 100), max_jumps=max_jumps)
    try:
        res = batch_fn(model, horizon, params, RandomBasis(seed), reps, horizon / 2)
    except Exception as exc:  # noqa: BLE001
        return CheckResult(name, False, {}, [f"pilot simulation failed: {exc}"])
    issues = []
    budget_fail = [r for r, why in res.failures.items() if "budget" in why]
    if budget_fail:
        issues.append(f"{len(budget_fail)} of {reps} pilot runs exhausted the jump budget "
                      f"({max_jumps}) within t={horizon}")
    other = [why for why in res.failures.values() if "budget" not in why]
    if other:
        issues.append(f"pilot runs failed: {other[0]}")
    details = {"mean_jumps": float(res.jump_counts.mean()), "reps": reps, "horizon": horizon,
               **{k: v for k, v in res.stats.items() if isinstance(v, (int, float, str))}}
    return CheckResult(name, not issues, details, issues)


# ------------------------------------------------------------------ export
def _exact_json(v):
    if isinstance(v, Fraction):
        return [v.numerator, v.denominator]
    if isinstance(v, (int, np.integer)):
        return [int(v), 1]
    if isinstance(v, sympy.Basic):
        if v.is_Rational:
            return [int(v.p), int(v.q)]
        return str(v)
    return float(v)


def _exact_from_json(v):
    if isinstance(v, list):
        return Fraction(v[0], v[1])
    if isinstance(v, str):
        expr = sympy.sympify(v)
        # symbolic entries are built from rate symbols, which are positive
        return expr.subs({s: sympy.Symbol(s.name, positive=True) for s in expr.free_symbols})
    return v


def gshs_to_dict(model: GshsModel) -> dict:
    k = model.kernel
    return {
        "kind": "gshs",
        "name": model.name,
        "source_hash": model.source_hash,
        "modes": [{"index": m.index, "name": m.name, "marking": list(m.marking) if m.marking else None,
                   "dim": d} for m, d in zip(model.modes, model.dims)],
        "lambda": [_exact_json(r.value) if r.is_constant else
                   {"sum": [_ref_text(t) for t, _ in r.terms]} for r in model.rates],
        "domains": [None if d is None else d.describe() for d in model.domains],
        "spontaneous": None if k.spontaneous is None else [[_exact_json(v) for v in row]
                                                           for row in k.spontaneous],
        "boundary": None if k.boundary is None else [None if row is None else [_exact_json(v) for v in row]
                                                     for row in k.boundary],
    }


def gshs_to_json(model: GshsModel) -> str:
    return json.dumps(gshs_to_dict(model), indent=2)


def gshs_description_from_json(text: str) -> dict:
    """Read back an exported description; exact entries become Fractions
    (or sympy expressions for symbolic rates)."""
    doc = json.loads(text)
    if doc.get("kind") != "gshs":
        raise ValueError("not a GSHS description")
    for key in ("spontaneous", "boundary"):
        if doc.get(key) is not None:
            doc[key] = [None if row is None else [_exact_from_json(v) for v in row] for row in doc[key]]
    doc["lambda"] = [_exact_from_json(v) if not isinstance(v, dict) else v for v in doc["lambda"]]
    return doc
