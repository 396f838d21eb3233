"""Lockstep simulation engine shared by the GSHS and HSDE backends.

All replications live in flat arrays: mode index ``theta``, continuous
state ``X`` (padded to the largest mode dimension) and local time ``t``.
Each ``dt`` step advances every replication to the next grid time or to
its next scheduled event, whichever comes first; boundary hits and
state-dependent hazards are detected after the step and localized inside
it.  Jumps are then applied to the affected replications as a batch.
"""
from __future__ import annotations

import math

import numpy as np

from .core import BatchResult, LabelCodes, RandomBasis, SolverParams, grid_stride, merge_paths, time_grid
from .sdcpn_exec import locate_crossing


class ThinningError(RuntimeError):
    """A jump intensity exceeded its declared bound."""


def _dyn_groups(model):
    """Group modes sharing the same (drift, diffusion, dim) objects."""
    groups: dict = {}
    for k in range(len(model.modes)):
        key = (id(model.f[k]), id(model.g[k]), model.dims[k])
        groups.setdefault(key, []).append(k)
    out = []
    for key, ks in groups.items():
        k0 = ks[0]
        f, g = model.f[k0], model.g[k0]
        zero = getattr(f, "is_zero", False) and (g is None or getattr(g, "is_zero", False))
        out.append((ks, f, g, model.dims[k0], zero, str(model.modes[k0])))
    return out


class HybridEngine:
    kind = "hybrid"

    def __init__(self, model, reps: int, params: SolverParams, basis: RandomBasis,
                 record_paths: bool = False, raise_errors: bool = False):
        self.model = model
        self.R = reps
        self.params = params
        self.record = record_paths
        self.raise_errors = raise_errors
        self.groups = _dyn_groups(model)
        self.group_of = np.zeros(len(model.modes), dtype=np.int64)
        for gi, grp in enumerate(self.groups):
            self.group_of[grp[0]] = gi
        names = ["init", "jump"] + [f"brownian:{grp[5]}" for grp in self.groups] + self.extra_streams()
        self.basis = basis.declare(*names)
        self.ujump = self.basis.stream("jump")
        self.n_max = max(max(model.dims), 1)
        self.theta = np.zeros(reps, dtype=np.int64)
        self.X = np.zeros((reps, self.n_max))
        self.t = np.zeros(reps)
        self.alive = np.ones(reps, dtype=bool)
        self.failures: dict[int, str] = {}
        self.jumps = np.zeros(reps, dtype=np.int64)
        self.next_sched = np.full(reps, math.inf)
        self.dprev = np.full(reps, -math.inf)
        self.codes = LabelCodes()
        self.code_of = np.array([self.codes.code(m.label) for m in model.modes], dtype=np.int64)
        self.dims = np.asarray(model.dims, dtype=np.int64)
        self.has_domain = [d is not None and not getattr(d, "never_hit", False) for d in model.domains]
        self.any_domain = any(self.has_domain)
        self.P = np.zeros((reps, self.n_max))  # states at the start of the current step
        self.logs = [[] for _ in range(reps)] if record_paths else None
        self.samples = [([], []) for _ in range(reps)] if record_paths else None
        self.stats = {"backend": self.kind}

    # -- hooks -------------------------------------------------------------
    def extra_streams(self):
        return []

    def on_start(self):
        pass

    def reset_clocks(self, idx, now):
        pass

    def hazard(self, act, h, Xprev):
        """Fractions ``s`` (inf when none) of state-dependent events this step."""
        return None

    def rollback_hazard(self, idx, s):
        pass

    def scheduled(self, idx):
        """Handle scheduled events of replications ``idx``; return the jumped subset."""
        raise NotImplementedError

    def hazard_events(self, idx):
        return idx

    def boundary_jump(self, idx):
        th, X = self.model.boundary_sample(self.theta[idx], self.X[idx], self.ujump)
        return th, X

    # -- helpers -----------------------------------------------------------
    def fail(self, idx, reason):
        if self.raise_errors:
            raise RuntimeError(reason)
        for r in np.atleast_1d(idx):
            self.alive[int(r)] = False
            self.failures.setdefault(int(r), reason)

    def distance(self, idx, X=None):
        X = self.X if X is None else X
        d = np.full(len(idx), -math.inf)
        if not self.any_domain:
            return d
        th = self.theta[idx]
        for k in np.flatnonzero(np.bincount(th, minlength=len(self.dims))):
            if not self.has_domain[k]:
                continue
            sel = th == k
            d[sel] = self.model.domains[k].distance(X[idx[sel], :self.dims[k]])
        return d

    def rec(self, r):
        if self.record:
            ts, xs = self.samples[r]
            ts.append(float(self.t[r]))
            xs.append(self.X[r, :self.dims[self.theta[r]]].copy())

    def log(self, r, kind):
        if self.record:
            self.logs[r].append((float(self.t[r]), self.model.modes[self.theta[r]], kind))

    # -- main loop ---------------------------------------------------------
    def start(self):
        th, X = self.model.init_batch(self.basis.stream("init"), self.R)
        self.theta[:] = th
        for r in range(self.R):
            self.X[r, :len(X[r])] = X[r]
        idx = np.arange(self.R)
        self.on_start()
        self.reset_clocks(idx, 0.0)
        self.dprev[:] = self.distance(idx)
        if self.record:
            for r in range(self.R):
                self.log(r, None)
                self.rec(r)

    def advance(self, act, h):
        """Euler-Maruyama step; returns the pre-step states (valid on ``act`` rows)."""
        Xprev = self.P
        gid = self.group_of[self.theta]
        all_act = bool(act.all())
        for gi, (ks, f, g, d, zero, name) in enumerate(self.groups):
            if all_act and len(self.groups) == 1:
                rows = None
                Xprev[:] = self.X
                x = Xprev[:, :d]
                hr = h
            else:
                rows = np.flatnonzero(act & (gid == gi))
                if rows.size == 0:
                    continue
                xr = self.X[rows]
                Xprev[rows] = xr
                x = xr[:, :d]
                hr = h[rows]
            if zero or d == 0:
                continue
            new = x + f(x) * hr[:, None]
            W = getattr(g, "matrix", None)
            if g is not None and not getattr(g, "is_zero", False):
                if W is not None:
                    z = self.basis.stream(f"brownian:{name}").standard_normal((len(x), W.shape[1]))
                    z *= np.sqrt(hr)[:, None]
                    new += z @ W.T
                else:
                    G = g(x)
                    z = self.basis.stream(f"brownian:{name}").standard_normal((len(x), G.shape[2]))
                    z *= np.sqrt(hr)[:, None]
                    new += np.einsum("mij,mj->mi", G, z)
            if not np.isfinite(new.sum()):
                bad = ~np.isfinite(new.sum(axis=1))
                idx = np.arange(len(x)) if rows is None else rows
                self.fail(idx[bad], "non-finite continuous state")
                new[bad] = x[bad]
            if rows is None:
                self.X[:, :d] = new
            else:
                self.X[rows, :d] = new
        return Xprev

    def step(self, t_end):
        tol_g = self.params.guard_tol
        while True:
            act = self.alive & (self.t < t_end)
            if not act.any():
                return
            target = np.minimum(t_end, self.next_sched)
            h = np.where(act, target - self.t, 0.0)
            Xprev = self.advance(act, h)
            ia = np.flatnonzero(act)
            s_b = np.full(self.R, math.inf)
            dnew = self.distance(ia)
            hit = (self.dprev[ia] < 0) & (dnew >= -tol_g)
            self.dprev[ia] = dnew
            if hit.any():
                hr = ia[hit]
                for k in np.unique(self.theta[hr]):
                    sub = hr[self.theta[hr] == k]
                    d = self.dims[k]
                    s_b[sub] = locate_crossing(self.model.domains[k], Xprev[sub, :d], self.X[sub, :d],
                                               h[sub], tol_g, self.params.time_tol)
            s_h = self.hazard(act, h, Xprev)
            s_min = s_b if s_h is None else np.minimum(s_b, s_h)
            sched = act & (self.next_sched <= t_end) & (s_min > 1.0)
            ev = act & (s_min <= 1.0)
            done = act & ~ev & ~sched
            self.t[done] = t_end
            if self.record:
                for r in np.flatnonzero(done):
                    self.rec(int(r))
            # localized in-step events: roll back to the event time
            ie = np.flatnonzero(ev)
            if ie.size:
                s = s_min[ie]
                self.X[ie] = Xprev[ie] + s[:, None] * (self.X[ie] - Xprev[ie])
                self.rollback_hazard(ie, s)
                self.t[ie] = self.t[ie] + s * h[ie]
                self.dprev[ie] = self.distance(ie)
                if self.record:
                    for r in ie:
                        self.rec(int(r))
                is_b = s_b[ie] <= s_min[ie]
                self.forced(ie[is_b])
                ih = ie[~is_b]
                if ih.size:
                    self.apply(self.hazard_events(ih), "spontaneous")
            isd = np.flatnonzero(sched)
            if isd.size:
                self.t[isd] = self.next_sched[isd]
                if self.record:
                    for r in isd:
                        self.rec(int(r))
                jumped = self.scheduled(isd)
                self.apply(jumped, "spontaneous", sampled=True)

    def apply(self, idx, kind, sampled=False, th=None, X=None):
        """Post-jump bookkeeping for replications ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return
        if not sampled:
            th, X = self.model.spontaneous_sample(self.theta[idx], self.X[idx], self.ujump)
            self.set_state(idx, th, X)
        elif th is not None:
            self.set_state(idx, th, X)
        self.after_jump(idx, kind)

    def set_state(self, idx, th, X):
        self.theta[idx] = th
        X = np.asarray(X, dtype=float)
        self.X[idx, :X.shape[1]] = X
        if X.shape[1] < self.n_max:
            self.X[idx, X.shape[1]:] = 0.0

    def forced(self, idx):
        for _ in range(self.params.max_jumps + 1):
            if idx.size == 0:
                return
            th, X = self.boundary_jump(idx)
            self.set_state(idx, th, X)
            self.after_jump(idx, "forced")
            idx = idx[self.alive[idx] & (self.dprev[idx] >= -self.params.guard_tol)]

    def after_jump(self, idx, kind):
        self.jumps[idx] += 1
        self.dprev[idx] = self.distance(idx)
        self.reset_clocks(idx, self.t[idx])
        over = idx[self.jumps[idx] > self.params.max_jumps]
        if over.size:
            self.fail(over, f"jump budget {self.params.max_jumps} exceeded")
        if self.record:
            for r in idx:
                self.log(int(r), kind)
                self.rec(int(r))

    def snapshot(self, modes, states, g):
        modes[:, g] = self.code_of[self.theta]
        states[:, g, :] = self.X
        pad = np.arange(self.n_max)[None, :] >= self.dims[self.theta][:, None]
        states[:, g, :][pad] = np.nan


def run_batch(engine_cls, model, horizon, params, basis, reps, grid_step, record_paths=False,
              raise_errors=False) -> BatchResult:
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    grid = time_grid(horizon, grid_step)
    stride = grid_stride(params.dt, grid_step)
    eng = engine_cls(model, reps, params, basis, record_paths, raise_errors)
    eng.start()
    modes = np.zeros((reps, len(grid)), dtype=np.int64)
    states = np.full((reps, len(grid), eng.n_max), np.nan)
    eng.snapshot(modes, states, 0)
    for k in range(stride * (len(grid) - 1)):
        eng.step((k + 1) * params.dt)
        if (k + 1) % stride == 0:
            eng.snapshot(modes, states, (k + 1) // stride)
    paths = None
    if record_paths:
        paths = [None if r in eng.failures else merge_paths(eng.logs[r], eng.samples[r], horizon)
                 for r in range(reps)]
    return BatchResult(grid, list(eng.codes.labels), modes, states, eng.jumps.copy(),
                       dict(eng.failures), paths, dict(eng.stats))
