"""Execution of SDCPN models.

The single-trajectory helpers (:func:`pre_enabled`, :func:`fire`,
:func:`immediate_closure`, ...) operate on a :class:`Marking`.  The
simulator runs ``R`` replications in lockstep: colours of all tokens are
advanced together with one Euler-Maruyama step per ``dt``; guard hits and
delay expiries are detected per replication and handled one replication at
a time with the same helpers.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (BatchResult, HybridPath, LabelCodes, ModeId, RandomBasis, SolverParams,
                   grid_stride, merge_paths, time_grid)
from .sdcpn_model import ModelError, SdcpnModel, validate


class ClosureError(RuntimeError):
    """Immediate transitions keep firing beyond the iteration bound."""


class SimulationError(RuntimeError):
    pass


# ------------------------------------------------------------------ marking
class DictStore:
    """Colour storage for a stand-alone marking."""

    def __init__(self):
        self._colours: dict[int, np.ndarray] = {}
        self._next = 0

    def colour(self, tid: int) -> np.ndarray:
        return self._colours[tid]

    def set_colour(self, tid: int, c) -> None:
        self._colours[tid][:] = c

    def add(self, place: int, colour) -> int:
        tid = self._next
        self._next += 1
        self._colours[tid] = np.array(colour, dtype=float).reshape(-1)
        return tid

    def remove(self, tid: int) -> None:
        del self._colours[tid]

    def copy(self) -> "DictStore":
        new = DictStore()
        new._colours = {k: v.copy() for k, v in self._colours.items()}
        new._next = self._next
        return new


class Marking:
    """Tokens per place (ordered ids) plus a colour store."""

    def __init__(self, dims, store=None):
        self.dims = tuple(dims)
        self.tokens: list[list[int]] = [[] for _ in self.dims]
        self.store = store if store is not None else DictStore()
        self._counts = [0] * len(self.dims)

    @classmethod
    def from_colours(cls, model: SdcpnModel, colours: dict, store=None) -> "Marking":
        m = cls(model.dims, store)
        for pid, cols in colours.items():
            p = model.place_index[pid]
            for c in cols:
                m.add_token(p, c)
        return m

    @classmethod
    def initial(cls, model: SdcpnModel, basis: RandomBasis, store=None) -> "Marking":
        return cls.from_colours(model, model.initial.sample(model, basis.stream("init")), store)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(self._counts)

    @property
    def colours(self) -> list[list[np.ndarray]]:
        return [[self.colour(tid) for tid in toks] for toks in self.tokens]

    def colour(self, tid: int) -> np.ndarray:
        return self.store.colour(tid)

    def add_token(self, place: int, colour=None) -> int:
        n = self.dims[place]
        c = np.zeros(0) if colour is None else np.asarray(colour, dtype=float).reshape(-1)
        if c.size != n:
            raise ModelError(f"colour of size {c.size} for place index {place} of dimension {n}")
        tid = self.store.add(place, c)
        self.tokens[place].append(tid)
        self._counts[place] += 1
        return tid

    def remove_token(self, place: int, tid: int) -> None:
        self.tokens[place].remove(tid)
        self.store.remove(tid)
        self._counts[place] -= 1

    def state_vector(self) -> np.ndarray:
        parts = [self.colour(tid) for p, toks in enumerate(self.tokens) if self.dims[p] for tid in toks]
        return np.concatenate(parts) if parts else np.zeros(0)

    def copy(self) -> "Marking":
        if not isinstance(self.store, DictStore):
            raise TypeError("only stand-alone markings can be copied")
        m = Marking(self.dims, self.store.copy())
        m.tokens = [list(t) for t in self.tokens]
        m._counts = list(self._counts)
        return m

    def __repr__(self):
        return f"Marking(counts={self.counts})"


@dataclass(frozen=True)
class EnablingCandidate:
    transition: str
    tokens: tuple[int, ...]
    colour: np.ndarray = field(compare=False, repr=False)
    kind: str = "pre-enabled"  # immediate-now | guard-hit | delay-expiry | pre-enabled
    scheduled: float | None = field(default=None, compare=False)

    @property
    def key(self):
        return (self.transition, self.tokens)


# ----------------------------------------------------------- pre-enabling
def _selection_table(model: SdcpnModel, counts: tuple[int, ...]):
    """Per transition, all admissible token-position selections for ``counts``.

    Depends on counts only, so it is cached on the model.
    """
    cache = model.__dict__.setdefault("_selection_cache", {})
    table = cache.get(counts)
    if table is not None:
        return table
    table = []
    for t in model.transitions:
        s = model.arcs_of(t.id)
        if any(counts[p] for p in s.inhibitors):
            continue
        if any(counts[p] == 0 for p in s.inputs):
            continue
        choices = [range(counts[p]) for p in s.inputs]
        sels = []
        for pos in itertools.product(*choices):
            used = list(zip(s.inputs, pos))
            if len(set(used)) == len(used):
                sels.append(tuple(used))
        if sels:
            table.append((t, sels))
    if len(cache) < 100_000:
        cache[counts] = table
    return table


def candidate_colour(model: SdcpnModel, marking: Marking, tokens) -> np.ndarray:
    parts = [marking.colour(tid) for tid in tokens]
    return np.concatenate(parts) if parts else np.zeros(0)


def pre_enabled(model: SdcpnModel, marking: Marking, kinds=None) -> list[EnablingCandidate]:
    """All (transition, token selection) pairs that are pre-enabled.

    One candidate per distinct selection of one token per ordinary/enabling
    input arc; transitions with a token in an inhibitor place are skipped.
    Immediate transitions come out with kind ``immediate-now``.
    """
    out = []
    for t, sels in _selection_table(model, marking.counts):
        if kinds is not None and t.kind not in kinds:
            continue
        kind = "immediate-now" if t.kind == "immediate" else "pre-enabled"
        for sel in sels:
            tokens = tuple(marking.tokens[p][i] for p, i in sel)
            out.append(EnablingCandidate(t.id, tokens, candidate_colour(model, marking, tokens), kind))
    return out


# ------------------------------------------------------------------- delays
def exp_variate(u: float) -> float:
    """``-ln U`` for ``U = 1 - u``, ``u`` uniform on [0, 1)."""
    return -math.log1p(-u)


def rate_value(transition) -> float | None:
    """Numeric value of a constant rate, ``None`` when state dependent."""
    rate = transition.delay_rate
    if not getattr(rate, "is_constant", False):
        return None
    try:
        return float(rate.value)
    except TypeError:
        raise ModelError(f"rate of {transition.id} is symbolic ({rate.value}); "
                         "bind it to a number to simulate") from None


def sample_delay(model: SdcpnModel, candidate: EnablingCandidate, basis: RandomBasis,
                 colour_path=None) -> float:
    """Delay until ``candidate`` fires, by inversion of its survivor function.

    Constant rates use the closed form; otherwise ``colour_path = (times,
    colours)`` gives the candidate's input colour on a grid starting at 0 and
    the rate integral is accumulated with the rectangle rule.
    """
    t = model.transitions[model.transition_index[candidate.transition]]
    if t.kind != "delay":
        raise ModelError(f"{t.id} is not a delay transition")
    target = exp_variate(basis.uniform())
    delta = rate_value(t)
    if delta is not None:
        return math.inf if delta <= 0 else target / delta
    if colour_path is None:
        raise ModelError(f"{t.id} has a state-dependent rate; a colour path is needed")
    times, cols = colour_path
    rates = np.asarray(t.delay_rate(np.atleast_2d(cols)), dtype=float)
    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise SimulationError(f"rate of {t.id} is not finite and non-negative along the path")
    acc = 0.0
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        inc = rates[k] * h
        if acc + inc >= target:
            return times[k] + (target - acc) / rates[k] - times[0]
        acc += inc
    return math.inf


# ------------------------------------------------------------------ colours
def advance_colours(model: SdcpnModel, marking: Marking, dt: float, basis: RandomBasis) -> Marking:
    """One Euler-Maruyama step for every coloured token, in place."""
    sq = math.sqrt(dt)
    for p, place in enumerate(model.places):
        if place.colour_dim == 0:
            continue
        for tid in marking.tokens[p]:
            c = marking.colour(tid)
            drift = np.asarray(place.drift(c[None, :]), dtype=float)[0]
            new = c + drift * dt
            if place.brownian_dim and not getattr(place.diffusion, "is_zero", False):
                g = np.asarray(place.diffusion(c[None, :]), dtype=float)[0]
                dB = basis.stream(f"brownian:{place.id}").standard_normal(place.brownian_dim) * sq
                new = new + g @ dB
            if not np.all(np.isfinite(new)):
                raise SimulationError(f"non-finite colour for token {tid} in place {place.id}")
            marking.store.set_colour(tid, new)
    return marking


def locate_crossing(guard, c0, c1, h, guard_tol: float, time_tol: float) -> np.ndarray:
    """Fraction ``s`` in (0, 1] of each step where the guard boundary is hit.

    Rows are steps whose colour goes from ``c0`` (inside) to ``c1`` (on or
    beyond the boundary).  The colour is taken linear within the step, which
    is what re-integrating a sub-step with the proportional part of the
    step's Brownian increment gives.  Bisection brings the bracket below
    ``time_tol``, then regula falsi drives ``|distance|`` below ``guard_tol``.
    """
    c0 = np.atleast_2d(c0)
    c1 = np.atleast_2d(c1)
    m = c0.shape[0]
    h = np.broadcast_to(np.asarray(h, dtype=float), (m,))
    dc = c1 - c0
    lo = np.zeros(m)
    hi = np.ones(m)
    dlo = guard.distance(c0)
    dhi = guard.distance(c1)
    done = np.abs(dhi) <= guard_tol
    s = np.where(done, 1.0, np.nan)
    for _ in range(200):
        wide = ~done & ((hi - lo) * h > time_tol)
        if not wide.any():
            break
        mid = 0.5 * (lo + hi)
        idx = np.flatnonzero(wide)
        d = guard.distance(c0[idx] + mid[idx, None] * dc[idx])
        inside = d < 0
        lo[idx[inside]] = mid[idx[inside]]
        dlo[idx[inside]] = d[inside]
        hi[idx[~inside]] = mid[idx[~inside]]
        dhi[idx[~inside]] = d[~inside]
    for _ in range(100):
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            break
        denom = dhi[todo] - dlo[todo]
        frac = np.where(denom > 0, -dlo[todo] / np.where(denom > 0, denom, 1.0), 1.0)
        cand = lo[todo] + (hi[todo] - lo[todo]) * np.clip(frac, 0.0, 1.0)
        d = guard.distance(c0[todo] + cand[:, None] * dc[todo])
        ok = np.abs(d) <= guard_tol
        s[todo[ok]] = cand[ok]
        done[todo[ok]] = True
        inside = ~ok & (d < 0)
        outside = ~ok & (d >= 0)
        lo[todo[inside]] = cand[inside]
        dlo[todo[inside]] = d[inside]
        hi[todo[outside]] = cand[outside]
        dhi[todo[outside]] = d[outside]
        stuck = ~ok & ((hi[todo] - lo[todo]) <= 1e-15)
        s[todo[stuck]] = hi[todo[stuck]]
        done[todo[stuck]] = True
    s = np.where(np.isnan(s), hi, s)
    return s


def detect_guard_hit(guard, t0: float, c0, t1: float, c1, guard_tol: float = 1e-9,
                     time_tol: float | None = None) -> float | None:
    """Crossing time of the guard boundary within ``[t0, t1]``, if any.

    The candidate colour moves from ``c0`` to ``c1``; a hit needs the start
    inside the guard set and the end on or beyond its boundary.
    """
    if getattr(guard, "never_hit", False):
        return None
    h = t1 - t0
    time_tol = h * 1e-3 if time_tol is None else time_tol
    d0 = float(guard.distance(np.atleast_2d(c0))[0])
    d1 = float(guard.distance(np.atleast_2d(c1))[0])
    if not (d0 < 0 and d1 >= -guard_tol):
        return None
    s = float(locate_crossing(guard, c0, c1, h, guard_tol, time_tol)[0])
    return t0 + s * h


# ---------------------------------------------------------------- conflicts
def _conflicts(model: SdcpnModel, a: EnablingCandidate, b: EnablingCandidate) -> bool:
    sa, sb = model.arcs_of(a.transition), model.arcs_of(b.transition)
    consumed_a = {tid for tid, k in zip(a.tokens, sa.input_kinds) if k == "ordinary"}
    consumed_b = {tid for tid, k in zip(b.tokens, sb.input_kinds) if k == "ordinary"}
    if consumed_a & set(b.tokens) or consumed_b & set(a.tokens):
        return True
    for x, sx, sy in ((a, sa, sb), (b, sb, sa)):
        support = model.firing(x.transition).support
        for j, p in enumerate(sx.outputs):
            if p in sy.inhibitors and any(e[j] for e in support):
                return True
    return False


def conflict_options(model: SdcpnModel, enabled: list[EnablingCandidate]) -> list[list[EnablingCandidate]]:
    """Firing plans admissible for candidates enabled at one instant.

    Immediate candidates pre-empt all others.  Each plan is a maximal set
    of pairwise non-conflicting candidates (so non-conflicting candidates
    always fire together, and conflicting ones are alternatives).
    """
    if not enabled:
        return [[]]
    imm = [c for c in enabled if c.kind == "immediate-now"]
    pool = imm if imm else list(enabled)
    n = len(pool)
    adj = [set() for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if _conflicts(model, pool[i], pool[j]):
                adj[i].add(j)
                adj[j].add(i)
    if not any(adj):
        return [pool]
    # maximal independent sets = maximal cliques of the complement graph
    comp = [set(range(n)) - adj[i] - {i} for i in range(n)]
    found: list[list[int]] = []

    def bron_kerbosch(r, p, x):
        if not p and not x:
            found.append(sorted(r))
            return
        pivot = max(p | x, key=lambda u: len(comp[u] & p))
        for v in sorted(p - comp[pivot]):
            bron_kerbosch(r | {v}, p & comp[v], x & comp[v])
            p = p - {v}
            x = x | {v}

    bron_kerbosch(set(), set(range(n)), set())
    found.sort()
    return [[pool[i] for i in s] for s in found]


def resolve_conflicts(model: SdcpnModel, enabled: list[EnablingCandidate],
                      basis: RandomBasis) -> list[EnablingCandidate]:
    """Choose the candidates that fire together; alternatives are equally likely."""
    options = conflict_options(model, enabled)
    if len(options) == 1:
        return options[0]
    k = min(int(basis.uniform() * len(options)), len(options) - 1)
    return options[k]


# ------------------------------------------------------------------- firing
def fire(model: SdcpnModel, marking: Marking, plan: list[EnablingCandidate],
         basis: RandomBasis) -> Marking:
    """Fire all candidates of ``plan`` simultaneously, in place."""
    colours = [candidate_colour(model, marking, c.tokens) for c in plan]
    removed: set[int] = set()
    for c in plan:
        s = model.arcs_of(c.transition)
        for tid, p, kind in zip(c.tokens, s.inputs, s.input_kinds):
            if kind != "ordinary":
                continue
            if tid in removed or tid not in marking.tokens[p]:
                raise ModelError(f"{c.transition}: token {tid} is no longer available")
            removed.add(tid)
    for c in plan:
        s = model.arcs_of(c.transition)
        for tid, p, kind in zip(c.tokens, s.inputs, s.input_kinds):
            if kind == "ordinary":
                marking.remove_token(p, tid)
    for c, col in zip(plan, colours):
        s = model.arcs_of(c.transition)
        fm = model.firing(c.transition)
        u = 0.0 if fm.deterministic else basis.uniform()
        e, a = fm.sampler(col, u)
        e = tuple(int(v) for v in e)
        if e not in fm.support:
            raise ModelError(f"{c.transition}: firing measure returned {e}, outside its support")
        a = np.asarray(a, dtype=float).reshape(-1)
        off = 0
        for ej, p in zip(e, s.outputs):
            if not ej:
                continue
            n = model.places[p].colour_dim
            marking.add_token(p, a[off:off + n])
            off += n
        if off != a.size:
            raise ModelError(f"{c.transition}: firing produced {a.size} colour values, expected {off}")
    return marking


def _immediate_candidates(model: SdcpnModel, marking: Marking) -> list[EnablingCandidate]:
    # colours are not needed to fire immediates; fire() reads them itself
    out = []
    for t, sels in _selection_table(model, marking.counts):
        if t.kind != "immediate":
            continue
        for sel in sels:
            tokens = tuple(marking.tokens[p][i] for p, i in sel)
            out.append(EnablingCandidate(t.id, tokens, None, "immediate-now"))
    return out


def immediate_closure(model: SdcpnModel, marking: Marking, basis: RandomBasis,
                      max_iter: int = 10_000) -> tuple[Marking, int]:
    """Fire immediate transitions until none is enabled; returns iterations."""
    for it in range(max_iter + 1):
        enabled = _immediate_candidates(model, marking)
        if not enabled:
            return marking, it
        if it == max_iter:
            break
        fire(model, marking, resolve_conflicts(model, enabled, basis), basis)
    raise ClosureError(f"immediate-transition cycle: still enabled after {max_iter} iterations "
                       f"(marking {marking.counts})")


def stream_names(model: SdcpnModel) -> list[str]:
    return ["init", "uniform"] + [f"brownian:{p.id}" for p in model.places if p.colour_dim]


# ---------------------------------------------------------------- simulator
class _Pool:
    """Colour rows of one place, shared by all replications."""

    def __init__(self, dim: int, cap: int):
        self.dim = dim
        self.X = np.zeros((cap, dim))
        self.P = np.zeros((cap, dim))  # colours at the start of the current step
        self.owner = np.full(cap, -1, dtype=np.int64)
        self.offset = np.zeros(cap, dtype=np.int64)  # block offset in the owner's state vector
        self.free = list(range(cap - 1, -1, -1))

    def add(self, rep: int, colour) -> int:
        if not self.free:
            cap = len(self.owner)
            new = max(cap, 16)
            self.X = np.vstack([self.X, np.zeros((new, self.dim))])
            self.P = np.vstack([self.P, np.zeros((new, self.dim))])
            self.owner = np.concatenate([self.owner, np.full(new, -1, dtype=np.int64)])
            self.offset = np.concatenate([self.offset, np.zeros(new, dtype=np.int64)])
            self.free = list(range(cap + new - 1, cap - 1, -1))
        row = self.free.pop()
        self.X[row] = colour
        self.P[row] = colour
        self.owner[row] = rep
        return row

    def remove(self, row: int) -> None:
        self.owner[row] = -1
        self.free.append(row)


class _BatchStore:
    """Colour store view of one replication on the shared pools."""

    def __init__(self, engine: "_Engine", rep: int):
        self.engine = engine
        self.rep = rep

    def colour(self, tid):
        p, row = self.engine.where[tid]
        return self.engine.pools[p].X[row] if row >= 0 else np.zeros(0)

    def set_colour(self, tid, c):
        p, row = self.engine.where[tid]
        if row >= 0:
            self.engine.pools[p].X[row] = c

    def add(self, place, colour):
        e = self.engine
        tid = e.next_tid
        e.next_tid += 1
        pool = e.pools[place]
        e.where[tid] = (place, pool.add(self.rep, colour) if pool is not None else -1)
        return tid

    def remove(self, tid):
        p, row = self.engine.where.pop(tid)
        if row >= 0:
            self.engine.pools[p].remove(row)


class _SlotTable:
    """Vectorized state of guard / state-dependent-delay candidates of one transition."""

    def __init__(self, transition, in_places, dims):
        self.t = transition
        self.in_places = in_places
        self.dims = dims
        self.cap = 0
        self.rep = np.zeros(0, dtype=np.int64)
        self.rows = np.zeros((0, len(in_places)), dtype=np.int64)
        self.active = np.zeros(0, dtype=bool)
        self.val = np.zeros(0)      # guard: distance; delay: accumulated hazard
        self.target = np.zeros(0)   # delay: exponential target
        self.free: list[int] = []

    def alloc(self, rep, rows, val, target=0.0) -> int:
        if not self.free:
            new = max(self.cap, 16)
            self.rep = np.concatenate([self.rep, np.zeros(new, dtype=np.int64)])
            self.rows = np.vstack([self.rows, np.zeros((new, self.rows.shape[1]), dtype=np.int64)])
            self.active = np.concatenate([self.active, np.zeros(new, dtype=bool)])
            self.val = np.concatenate([self.val, np.zeros(new)])
            self.target = np.concatenate([self.target, np.zeros(new)])
            self.free = list(range(self.cap + new - 1, self.cap - 1, -1))
            self.cap += new
        k = self.free.pop()
        self.rep[k] = rep
        self.rows[k] = rows
        self.active[k] = True
        self.val[k] = val
        self.target[k] = target
        return k

    def release(self, k):
        self.active[k] = False
        self.free.append(k)

    def colours(self, pools, idx, X=None):
        parts = []
        for j, p in enumerate(self.in_places):
            if self.dims[j]:
                src = pools[p].X if X is None else X[p]
                parts.append(src[self.rows[idx, j]])
        return np.concatenate(parts, axis=1) if parts else np.zeros((len(idx), 0))


@dataclass
class _Cand:
    kind: str                     # "guard" | "delay" | "hazard"
    table: _SlotTable | None = None
    slot: int = -1
    expiry: float = math.inf


class _Engine:
    def __init__(self, model: SdcpnModel, reps: int, params: SolverParams, basis: RandomBasis,
                 record_paths: bool, raise_errors: bool):
        self.model = model
        self.R = reps
        self.params = params
        self.basis = basis.declare(*stream_names(model))
        self.record = record_paths
        self.raise_errors = raise_errors
        self.pools = [_Pool(p.colour_dim, reps) if p.colour_dim else None for p in model.places]
        self.where: dict[int, tuple[int, int]] = {}
        self.next_tid = 0
        self.tables: dict[str, _SlotTable] = {}
        self.rate_const: dict[str, float | None] = {}
        for t in model.transitions:
            s = model.arcs_of(t.id)
            if t.kind == "delay":
                self.rate_const[t.id] = rate_value(t)
            needs_table = (t.kind == "guard" and not getattr(t.guard, "never_hit", False)) or \
                (t.kind == "delay" and self.rate_const[t.id] is None)
            if needs_table:
                self.tables[t.id] = _SlotTable(t, s.inputs, [model.places[p].colour_dim for p in s.inputs])
        self.markings = [Marking(model.dims, _BatchStore(self, r)) for r in range(reps)]
        self.cands: list[dict] = [dict() for _ in range(reps)]
        self.t = np.zeros(reps)
        self.next_event = np.full(reps, math.inf)
        self.alive = np.ones(reps, dtype=bool)
        self.failures: dict[int, str] = {}
        self.jumps = np.zeros(reps, dtype=np.int64)
        self.codes = LabelCodes()
        self.mode = np.zeros(reps, dtype=np.int64)
        self.width = 0
        self.logs = [[] for _ in range(reps)] if record_paths else None
        self.samples = [([], []) for _ in range(reps)] if record_paths else None
        self.n_events = 0

    # -- helpers -----------------------------------------------------------
    def fail(self, r: int, reason: str, exc: Exception | None = None):
        if self.raise_errors:
            if exc is not None:
                raise exc
            raise SimulationError(reason)
        self.alive[r] = False
        self.failures[r] = reason

    def relayout(self, r: int):
        """Refresh state-vector offsets of replication ``r``'s tokens."""
        off = 0
        m = self.markings[r]
        for p, toks in enumerate(m.tokens):
            pool = self.pools[p]
            if pool is None:
                continue
            for tid in toks:
                pool.offset[self.where[tid][1]] = off
                off += pool.dim
        self.width = max(self.width, off)
        counts = m.counts
        self.mode[r] = self.codes.code(counts)

    def token_rows(self, r: int):
        m = self.markings[r]
        for p, toks in enumerate(m.tokens):
            if self.pools[p] is not None:
                for tid in toks:
                    yield p, self.where[tid][1]

    def refresh(self, r: int, now: float, reset=()):
        """Sync candidate clocks of ``r`` with its current marking."""
        model = self.model
        m = self.markings[r]
        old = self.cands[r]
        for key in reset:
            rec = old.pop(key, None)
            if rec is not None and rec.table is not None:
                rec.table.release(rec.slot)
        new: dict = {}
        for t, sels in _selection_table(model, m.counts):
            if t.kind == "immediate":
                continue
            for sel in sels:
                tokens = tuple(m.tokens[p][i] for p, i in sel)
                key = (t.id, tokens)
                rec = old.pop(key, None)
                if rec is None:
                    rec = self._new_candidate(r, t, tokens, now)
                elif rec.kind == "guard" and rec.table is not None:
                    c = candidate_colour(model, m, tokens)
                    rec.table.val[rec.slot] = float(t.guard.distance(c[None, :])[0])
                new[key] = rec
        for rec in old.values():
            if rec.table is not None:
                rec.table.release(rec.slot)
        self.cands[r] = new
        self.next_event[r] = min((rec.expiry for rec in new.values() if rec.kind == "delay"),
                                 default=math.inf)

    def _new_candidate(self, r, t, tokens, now):
        if t.kind == "guard":
            table = self.tables.get(t.id)
            if table is None:
                return _Cand("guard")  # boundary never reached
            rows = [self.where[tid][1] for tid in tokens]
            c = candidate_colour(self.model, self.markings[r], tokens)
            d = float(t.guard.distance(c[None, :])[0])
            return _Cand("guard", table, table.alloc(r, rows, d))
        target = exp_variate(self.basis.uniform())
        delta = self.rate_const[t.id]
        if delta is None:
            rows = [self.where[tid][1] for tid in tokens]
            table = self.tables[t.id]
            return _Cand("hazard", table, table.alloc(r, rows, 0.0, target))
        return _Cand("delay", expiry=now + (target / delta if delta > 0 else math.inf))

    def rec_sample(self, r):
        if self.record:
            ts, xs = self.samples[r]
            ts.append(float(self.t[r]))
            xs.append(self.markings[r].state_vector().copy())

    def mode_id(self, r):
        counts = self.markings[r].counts
        return ModeId(int(self.mode[r]), counts, self.model.mode_name(counts))

    # -- main loop ---------------------------------------------------------
    def start(self):
        for r in range(self.R):
            m = self.markings[r]
            try:
                init = self.model.initial.sample(self.model, self.basis.stream("init"))
                for pid, cols in init.items():
                    p = self.model.place_index[pid]
                    for c in cols:
                        m.add_token(p, c)
                immediate_closure(self.model, m, self.basis, self.params.max_immediate)
            except ClosureError as exc:
                self.relayout(r)
                self.fail(r, str(exc), exc)
                continue
            self.relayout(r)
            self.refresh(r, 0.0)
            if self.record:
                self.logs[r].append((0.0, self.mode_id(r), None))
                self.rec_sample(r)

    def advance(self, act: np.ndarray, h: np.ndarray):
        """Euler-Maruyama step of length ``h[r]`` for replications in ``act``."""
        prev = {}
        for p, pool in enumerate(self.pools):
            if pool is None:
                continue
            place = self.model.places[p]
            rows = np.flatnonzero(pool.owner >= 0)
            rows = rows[act[pool.owner[rows]]]
            prev[p] = pool.P
            if rows.size == 0:
                continue
            hr = h[pool.owner[rows]]
            x = pool.X[rows]
            pool.P[rows] = x
            new = x + place.drift(x) * hr[:, None]
            diff = place.diffusion
            if place.brownian_dim and not getattr(diff, "is_zero", False):
                z = self.basis.stream(f"brownian:{place.id}").standard_normal((rows.size, place.brownian_dim))
                z *= np.sqrt(hr)[:, None]
                W = getattr(diff, "matrix", None)
                new += z @ W.T if W is not None else np.einsum("mij,mj->mi", diff(x), z)
            if not np.isfinite(new.sum()):
                bad = ~np.all(np.isfinite(new), axis=1)
                for i in np.flatnonzero(bad):
                    r = int(pool.owner[rows[i]])
                    self.fail(r, f"non-finite colour in place {place.id} at t={self.t[r] + hr[i]:.6g}")
                new[bad] = x[bad]
            pool.X[rows] = new
        return prev

    def detect(self, act, h, prev):
        """Earliest in-step event fraction per replication plus the hits."""
        s_min = np.full(self.R, np.inf)
        hits = []  # (table, slots, s)
        tol_g = self.params.guard_tol
        for tid, table in self.tables.items():
            if table.cap == 0:
                continue
            slots = np.flatnonzero(table.active)
            slots = slots[act[table.rep[slots]]]
            if slots.size == 0:
                continue
            reps = table.rep[slots]
            if table.t.kind == "guard":
                c1 = table.colours(self.pools, slots)
                d1 = table.t.guard.distance(c1)
                d0 = table.val[slots]
                hit = (d0 < 0) & (d1 >= -tol_g)
                table.val[slots] = d1
                if hit.any():
                    hs = slots[hit]
                    c0 = table.colours(self.pools, hs, prev)
                    s = locate_crossing(table.t.guard, c0, c1[hit], h[reps[hit]], tol_g,
                                        self.params.time_tol)
                    hits.append((table, hs, s))
                    np.minimum.at(s_min, reps[hit], s)
            else:
                c0 = table.colours(self.pools, slots, prev)
                rate = np.asarray(table.t.delay_rate(c0), dtype=float)
                if not np.all(np.isfinite(rate)) or np.any(rate < 0):
                    for r in np.unique(reps[~(np.isfinite(rate) & (rate >= 0))]):
                        self.fail(int(r), f"rate of {tid} not finite and non-negative")
                    rate = np.where(np.isfinite(rate) & (rate >= 0), rate, 0.0)
                inc = rate * h[reps]
                acc0 = table.val[slots]
                table.val[slots] = acc0 + inc
                hit = acc0 + inc >= table.target[slots]
                if hit.any():
                    hs = slots[hit]
                    s = np.clip((table.target[hs] - acc0[hit]) / inc[hit], 0.0, 1.0)
                    hits.append((table, hs, s))
                    np.minimum.at(s_min, reps[hit], s)
                table.prev_acc = (slots, acc0, inc)
        return s_min, hits

    def handle(self, r, t_e, s, h, prev, hit_cands):
        """Event of replication ``r`` at time ``t_e`` (fraction ``s`` of its step)."""
        model = self.model
        m = self.markings[r]
        if s < 1.0:
            for p, row in self.token_rows(r):
                x0 = prev[p][row]
                self.pools[p].X[row] = x0 + s * (self.pools[p].X[row] - x0)
            for table in self.tables.values():
                if table.t.kind == "delay" and hasattr(table, "prev_acc"):
                    slots, acc0, inc = table.prev_acc
                    mine = table.rep[slots] == r
                    table.val[slots[mine]] = acc0[mine] + s * inc[mine]
        self.t[r] = t_e
        if self.record:
            self.rec_sample(r)
        enabled = []
        tt = self.params.time_tol
        for key, rec in self.cands[r].items():
            kind = None
            if rec.kind == "delay" and rec.expiry == t_e:
                kind = "delay-expiry"
            elif rec.table is not None and rec.slot in hit_cands.get(id(rec.table), {}):
                if abs(hit_cands[id(rec.table)][rec.slot] - s) * h <= tt:
                    kind = "guard-hit" if rec.kind == "guard" else "delay-expiry"
            if kind is not None:
                tokens = key[1]
                enabled.append(EnablingCandidate(key[0], tokens, candidate_colour(model, m, tokens),
                                                 kind, t_e))
        if not enabled:
            return
        try:
            plan = resolve_conflicts(model, enabled, self.basis)
            fire(model, m, plan, self.basis)
            immediate_closure(model, m, self.basis, self.params.max_immediate)
        except (ClosureError, ModelError) as exc:
            self.relayout(r)
            self.fail(r, str(exc), exc)
            return
        self.n_events += 1
        self.jumps[r] += 1
        kind = "forced" if any(c.kind == "guard-hit" for c in plan) else "spontaneous"
        self.relayout(r)
        self.refresh(r, t_e, reset=[c.key for c in plan])
        if self.record:
            self.logs[r].append((t_e, self.mode_id(r), kind))
            self.rec_sample(r)
        if self.jumps[r] > self.params.max_jumps:
            self.fail(r, f"jump budget {self.params.max_jumps} exceeded by t={t_e:.6g}")

    def step(self, t_end: float):
        while True:
            act = self.alive & (self.t < t_end)
            if not act.any():
                return
            target = np.minimum(t_end, self.next_event)
            h = np.where(act, target - self.t, 0.0)
            prev = self.advance(act, h)
            s_min, hits = self.detect(act, h, prev)
            sched = act & (self.next_event <= t_end)
            s_min = np.where(sched, np.minimum(s_min, 1.0), s_min)
            ev = np.flatnonzero(act & (s_min <= 1.0))
            done = act.copy()
            done[ev] = False
            self.t[done] = t_end
            if self.record:
                for r in np.flatnonzero(done):
                    self.rec_sample(int(r))
            if ev.size:
                hit_map: dict[int, dict[int, float]] = {}
                for table, slots, s in hits:
                    d = hit_map.setdefault(id(table), {})
                    for k, v in zip(slots.tolist(), s.tolist()):
                        d[k] = v
                for r in ev.tolist():
                    s = float(s_min[r])
                    t_e = target[r] if s >= 1.0 else self.t[r] + s * h[r]
                    self.handle(r, float(t_e), s, float(h[r]), prev, hit_map)
            for table in self.tables.values():
                if hasattr(table, "prev_acc"):
                    del table.prev_acc

    def snapshot(self, modes, states, g):
        modes[:, g] = self.mode
        if states.shape[2] < self.width:
            return False
        for pool in self.pools:
            if pool is None:
                continue
            rows = np.flatnonzero(pool.owner >= 0)
            if rows.size == 0:
                continue
            owner = pool.owner[rows]
            off = pool.offset[rows]
            for j in range(pool.dim):
                states[owner, g, off + j] = pool.X[rows, j]
        return True


def simulate_batch(model: SdcpnModel, horizon: float, params: SolverParams, basis: RandomBasis,
                   reps: int, grid_step: float, record_paths: bool = False,
                   raise_errors: bool = False) -> BatchResult:
    """Run ``reps`` replications and sample them on a regular time grid."""
    problems = validate(model)
    if problems:
        raise ModelError("invalid model: " + "; ".join(str(v) for v in problems))
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    grid = time_grid(horizon, grid_step)
    stride = grid_stride(params.dt, grid_step)
    n_steps = stride * (len(grid) - 1)
    eng = _Engine(model, reps, params, basis, record_paths, raise_errors)
    eng.start()
    modes = np.zeros((reps, len(grid)), dtype=np.int64)
    states = np.full((reps, len(grid), max(eng.width, 1)), np.nan)

    def snap(g):
        nonlocal states
        if not eng.snapshot(modes, states, g):
            wider = np.full((reps, len(grid), eng.width), np.nan)
            wider[:, :, :states.shape[2]] = states
            states = wider
            eng.snapshot(modes, states, g)
        # stale values of replications in a smaller mode
        if eng.width:
            w = _mode_widths(eng)
            mask = np.arange(states.shape[2])[None, :] >= w[:, None]
            states[:, g, :][mask] = np.nan

    snap(0)
    for k in range(n_steps):
        eng.step((k + 1) * params.dt)
        if (k + 1) % stride == 0:
            snap((k + 1) // stride)
    paths = None
    if record_paths:
        paths = []
        for r in range(reps):
            if r in eng.failures:
                paths.append(None)
                continue
            paths.append(merge_paths(eng.logs[r], eng.samples[r], horizon))
    return BatchResult(grid, list(eng.codes.labels), modes, states[:, :, :max(eng.width, 0) or 1],
                       eng.jumps.copy(), dict(eng.failures), paths,
                       {"events": eng.n_events, "backend": "sdcpn"})


def _mode_widths(eng: _Engine) -> np.ndarray:
    widths = {}
    dims = eng.model.dims
    for code, label in enumerate(eng.codes.labels):
        widths[code] = sum(c * d for c, d in zip(label, dims))
    return np.array([widths[int(c)] for c in eng.mode])


def simulate_sdcpn(model: SdcpnModel, horizon: float, params: SolverParams | None = None,
                   basis: RandomBasis | None = None, seed: int = 0) -> HybridPath:
    """One trajectory of the net: marking (mode) and token colours over ``[0, horizon]``."""
    params = params or SolverParams()
    basis = basis if basis is not None else RandomBasis(seed)
    res = simulate_batch(model, horizon, params, basis, 1, horizon, record_paths=True, raise_errors=True)
    return res.paths[0]
