"""Shared hybrid-state types, càdlàg trajectories and the randomness basis.

All three executors (Petri net, automaton, jump SDE) emit :class:`HybridPath`
objects built from the same segment encoding, and draw every random number
from named substreams of a :class:`RandomBasis`.
"""
from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Bad solver / randomness configuration (unknown stream, bad step...)."""


class PathAssemblyError(ValueError):
    """Discrete and continuous parts of a trajectory do not line up."""


JUMP_KINDS = ("spontaneous", "forced", "immediate-closure")


@dataclass(frozen=True, order=True)
class ModeId:
    """Element of a finite discrete set.

    ``marking`` is the originating token-count vector when the mode was
    derived from a Petri net; it is also the label used when comparing
    ensembles across backends.
    """

    index: int
    marking: tuple[int, ...] | None = field(default=None, compare=False)
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"mode index must be non-negative, got {self.index}")

    @property
    def label(self):
        if self.marking is not None:
            return tuple(self.marking)
        return self.name if self.name is not None else self.index

    def __str__(self):
        if self.name:
            return self.name
        if self.marking is not None:
            return "-".join(str(c) for c in self.marking)
        return str(self.index)


def label_text(label) -> str:
    if isinstance(label, tuple):
        return "-".join(str(c) for c in label)
    return str(label)


@dataclass(frozen=True)
class HybridState:
    mode: ModeId
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))


@dataclass
class Segment:
    """Constant-mode piece of a path.

    ``times[0]`` is the segment start (value = post-jump state).  When the
    segment is followed by a jump, the last sample sits at the jump time and
    holds the left limit.
    """

    start: float
    mode: Any
    times: np.ndarray
    states: np.ndarray
    closed: bool = False  # True when the last sample is a left limit


@dataclass
class HybridPath:
    segments: list[Segment]
    jump_times: list[float]
    jump_kinds: list[str]
    horizon: float

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times) - 1

    def _segment_at(self, t: float) -> Segment:
        if t < 0 or t > self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        idx = int(np.searchsorted(self.jump_times, t, side="right")) - 1
        return self.segments[idx]

    def mode_at(self, t: float):
        return self._segment_at(t).mode

    def value_at(self, t: float) -> np.ndarray:
        """State at ``t`` (right-continuous: post-jump at a jump time).

        Between recorded samples the last sample is held.
        """
        seg = self._segment_at(t)
        times = seg.times[:-1] if seg.closed else seg.times
        states = seg.states[:-1] if seg.closed else seg.states
        i = int(np.searchsorted(times, t, side="right")) - 1
        return states[i]

    def left_limit(self, t: float) -> np.ndarray:
        """Left limit at ``t``; differs from :meth:`value_at` only at jumps."""
        if t in self.jump_times[1:]:
            k = self.jump_times.index(t)
            seg = self.segments[k - 1]
            return seg.states[-1]
        return self.value_at(t)

    def check_cadlag(self) -> list[str]:
        """Return a list of encoding problems (empty when the path is sound)."""
        problems = []
        if not self.jump_times or self.jump_times[0] != 0.0:
            problems.append("jump_times must start at 0")
        if any(b <= a for a, b in zip(self.jump_times, self.jump_times[1:])):
            problems.append("jump_times not strictly increasing")
        if len(self.segments) != len(self.jump_times):
            problems.append("one segment per jump time expected")
        if len(self.jump_kinds) != len(self.jump_times) - 1:
            problems.append("one kind per jump expected")
        for k, seg in enumerate(self.segments):
            if seg.start != self.jump_times[k] or seg.times[0] != seg.start:
                problems.append(f"segment {k} does not start at its jump time")
            if np.any(np.diff(seg.times) < 0):
                problems.append(f"segment {k} samples out of order")
            last = k == len(self.segments) - 1
            if not last:
                if not seg.closed or seg.times[-1] != self.jump_times[k + 1]:
                    problems.append(f"segment {k} lacks the left limit at the next jump")
            elif seg.times[-1] > self.horizon:
                problems.append("samples beyond horizon")
        return problems

    def sample(self, grid: Sequence[float]):
        """Modes and right-continuous states on ``grid``."""
        modes = [self.mode_at(t) for t in grid]
        states = np.array([self.value_at(t) for t in grid])
        return modes, states

    # -- export -----------------------------------------------------------
    def rows(self):
        """Yield (t, mode, x, jump_flag) in time order, both sides of jumps."""
        for k, seg in enumerate(self.segments):
            n = len(seg.times)
            for i in range(n):
                is_left_limit = seg.closed and i == n - 1
                flag = 1 if (i == 0 and k > 0) else 0
                if is_left_limit:
                    flag = 0
                yield seg.times[i], seg.mode, seg.states[i], flag

    def to_csv(self, fh=None) -> str | None:
        own = fh is None
        fh = io.StringIO() if own else fh
        dim = max((seg.states.shape[1] for seg in self.segments), default=0)
        writer = csv.writer(fh)
        writer.writerow(["t", "mode"] + [f"x_{i + 1}" for i in range(dim)] + ["jump_flag"])
        for t, mode, x, flag in self.rows():
            writer.writerow([repr(float(t)), label_text(getattr(mode, "label", mode))]
                            + [repr(float(v)) for v in x] + [flag])
        return fh.getvalue() if own else None


def json_envelope(seed: int, model_hash: str, solver: dict, **extra) -> str:
    """Metadata record accompanying exported paths / ensembles."""
    doc = {"seed": int(seed), "model_hash": model_hash, "solver": solver}
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    return str(obj)


def merge_paths(discrete, continuous, horizon: float) -> HybridPath:
    """Assemble a càdlàg path from a mode log and continuous samples.

    ``discrete`` is a sequence of ``(t, mode, kind)`` starting with the mode
    at ``t = 0``.  Entries sharing a time collapse into one jump whose mode
    is the last one logged (the post-closure marking); the jump keeps the
    kind of its triggering firing.

    ``continuous`` is ``(times, states)`` in non-decreasing time order.  At
    a jump time the first sample is the left limit and the last the
    post-jump value.  The state dimension may change across jumps.
    """
    times = np.asarray(continuous[0], dtype=float)
    states = [np.asarray(x, dtype=float).reshape(-1) for x in continuous[1]]
    if len(times) == 0:
        raise PathAssemblyError("no continuous samples")
    if len(states) != len(times):
        raise PathAssemblyError("times and states differ in length")
    if np.any(np.diff(times) < 0):
        raise PathAssemblyError("continuous samples out of order")
    if times[0] != 0.0:
        raise PathAssemblyError("continuous samples must start at t=0")
    if times[-1] < horizon:
        raise PathAssemblyError(f"samples end at {times[-1]} before horizon {horizon}")

    entries = sorted(enumerate(discrete), key=lambda e: (e[1][0], e[0]))
    if not entries or entries[0][1][0] != 0.0:
        raise PathAssemblyError("discrete part must give the mode at t=0")
    jump_times: list[float] = []
    modes: list[Any] = []
    kinds: list[str] = []
    for _, (t, mode, kind) in entries:
        t = float(t)
        if t > horizon:
            break
        if jump_times and t == jump_times[-1]:
            modes[-1] = mode
            if kinds and kinds[-1] == "immediate-closure" and kind != "immediate-closure" and t > 0:
                kinds[-1] = kind
            continue
        if jump_times and t < jump_times[-1]:
            raise PathAssemblyError("discrete log not time ordered")
        if kind is not None and kind not in JUMP_KINDS and t > 0:
            raise PathAssemblyError(f"unknown jump kind {kind!r}")
        jump_times.append(t)
        modes.append(mode)
        if t > 0:
            kinds.append(kind)

    segments = []
    for k, tau in enumerate(jump_times):
        lo = int(np.searchsorted(times, tau, side="left"))
        hi_lo = int(np.searchsorted(times, tau, side="right"))
        if lo == hi_lo:
            raise PathAssemblyError(f"no continuous sample at jump time {tau}")
        start = hi_lo - 1  # last sample at tau is the post-jump value
        if k + 1 < len(jump_times):
            nxt = jump_times[k + 1]
            end = int(np.searchsorted(times, nxt, side="left"))
            if end == len(times) or times[end] != nxt:
                raise PathAssemblyError(f"no left-limit sample at jump time {nxt}")
            idx = list(range(start, end)) + [end]
            closed = True
        else:
            end = int(np.searchsorted(times, horizon, side="right"))
            idx = list(range(start, end))
            closed = False
        block = [states[i] for i in idx]
        if len({x.size for x in block}) > 1:
            raise PathAssemblyError(f"state dimension changes inside the segment starting at {tau}")
        segments.append(Segment(tau, modes[k], times[idx].copy(), np.array(block).reshape(len(idx), -1),
                                closed))
    return HybridPath(segments, jump_times, kinds, float(horizon))


class RandomBasis:
    """Named, independent random substreams derived from one master seed.

    Streams must be declared; each name maps to its own ``SeedSequence``
    child so consuming one stream never shifts another.  ``spawn(i)`` gives
    the basis of replication chunk ``i``.
    """

    def __init__(self, master_seed: int, streams: Iterable[str] = (), _path: tuple[int, ...] = ()):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self._path = tuple(_path)
        self._names = set(streams)
        self._gens: dict[str, np.random.Generator] = {}

    def declare(self, *names: str) -> "RandomBasis":
        self._names.update(names)
        return self

    @property
    def streams(self) -> frozenset[str]:
        return frozenset(self._names)

    def spawn(self, index: int) -> "RandomBasis":
        return RandomBasis(self.master_seed, self._names, self._path + (int(index),))

    def stream(self, name: str) -> np.random.Generator:
        gen = self._gens.get(name)
        if gen is None:
            if name not in self._names:
                raise ConfigurationError(f"unknown random stream {name!r}")
            key = self._path + (zlib.crc32(name.encode()),)
            seq = np.random.SeedSequence(self.master_seed, spawn_key=key)
            gen = self._gens[name] = np.random.Generator(np.random.PCG64(seq))
        return gen

    def uniform(self, name: str = "uniform") -> float:
        return float(self.stream(name).random())


def brownian_increment(basis: RandomBasis, stream: str, dt: float, dim: int) -> np.ndarray:
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if dim < 1:
        raise ConfigurationError(f"dim must be >= 1, got {dim}")
    return basis.stream(stream).standard_normal(dim) * math.sqrt(dt)


@dataclass
class SolverParams:
    """Knobs shared by the three simulators."""

    dt: float = 1e-3
    guard_tol: float = 1e-9
    time_tol: float | None = None  # defaults to dt * 1e-3
    max_immediate: int = 10_000
    max_jumps: int = 100_000
    wall_budget: float | None = None  # seconds per replication

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.time_tol is None:
            self.time_tol = self.dt * 1e-3

    def as_dict(self) -> dict:
        return {"dt": self.dt, "guard_tol": self.guard_tol, "time_tol": self.time_tol,
                "max_immediate": self.max_immediate, "max_jumps": self.max_jumps}


def grid_stride(dt: float, grid_step: float) -> int:
    stride = int(round(grid_step / dt))
    if stride < 1 or abs(stride * dt - grid_step) > 1e-9 * max(1.0, grid_step):
        raise ConfigurationError(f"grid step {grid_step} is not a multiple of dt {dt}")
    return stride


def time_grid(horizon: float, grid_step: float) -> np.ndarray:
    n = int(round(horizon / grid_step))
    if abs(n * grid_step - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigurationError(f"horizon {horizon} is not a multiple of grid step {grid_step}")
    return np.arange(n + 1) * grid_step


@dataclass
class BatchResult:
    """Grid samples of ``R`` replications from one simulator run.

    ``modes[r, g]`` indexes ``labels``; ``states`` is NaN-padded when the
    dimension varies by mode.  Failed replications keep their samples up to
    the failure and are listed in ``failures`` (index -> reason).
    """

    grid: np.ndarray
    labels: list
    modes: np.ndarray
    states: np.ndarray
    jump_counts: np.ndarray
    failures: dict[int, str] = field(default_factory=dict)
    paths: list[HybridPath] | None = None
    stats: dict = field(default_factory=dict)

    @property
    def reps(self) -> int:
        return self.modes.shape[0]

    def ok_mask(self) -> np.ndarray:
        mask = np.ones(self.reps, dtype=bool)
        mask[list(self.failures)] = False
        return mask


class LabelCodes:
    """Stable label -> integer code table."""

    def __init__(self):
        self.labels: list = []
        self._codes: dict = {}

    def code(self, label) -> int:
        c = self._codes.get(label)
        if c is None:
            c = self._codes[label] = len(self.labels)
            self.labels.append(label)
        return c
