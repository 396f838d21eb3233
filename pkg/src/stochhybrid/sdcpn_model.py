"""Stochastically and dynamically coloured Petri nets: structure and validation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import conditions
from .functions import ArcLayout, CatalogError, FiringMeasure, dirac_firing

TRANSITION_KINDS = ("guard", "delay", "immediate")
ARC_KINDS = ("ordinary", "enabling", "inhibitor")


@dataclass(frozen=True)
class Place:
    id: str
    colour_dim: int = 0
    drift: Any = None
    diffusion: Any = None
    brownian_dim: int = 0


@dataclass(frozen=True)
class Transition:
    """``firing`` is a bound :class:`FiringMeasure`, a factory taking the
    transition's :class:`ArcLayout`, or ``None`` for colour-copying Dirac."""

    id: str
    kind: str
    guard: Any = None
    delay_rate: Any = None
    firing: Any = None


@dataclass(frozen=True)
class Arc:
    id: str
    kind: str
    source: str
    target: str


@dataclass
class InitialMarking:
    """Deterministic token counts with per-token colour samplers.

    ``colours[place]`` is a list of samplers ``rng -> colour`` (one per
    token, or a single one reused for all tokens of the place).  ``joint``,
    when given, replaces all per-place samplers: ``rng -> {place: [colour,
    ...]}``.
    """

    counts: dict[str, int] = field(default_factory=dict)
    colours: dict[str, list] = field(default_factory=dict)
    joint: Callable | None = None

    def sample(self, model: "SdcpnModel", rng: np.random.Generator) -> dict[str, list[np.ndarray]]:
        out: dict[str, list[np.ndarray]] = {}
        joint = self.joint(rng) if self.joint is not None else None
        for p in model.places:
            n = int(self.counts.get(p.id, 0))
            if p.colour_dim == 0:
                out[p.id] = [np.zeros(0)] * n
                continue
            if joint is not None:
                cols = [np.asarray(c, dtype=float) for c in joint.get(p.id, [])]
            else:
                samplers = self.colours.get(p.id, [])
                if n and not samplers:
                    raise ValueError(f"place {p.id} has tokens but no initial colour")
                cols = [np.asarray(samplers[min(i, len(samplers) - 1)](rng), dtype=float)
                        for i in range(n)]
            if len(cols) != n:
                raise ValueError(f"place {p.id}: {len(cols)} colours for {n} tokens")
            for c in cols:
                if c.shape != (p.colour_dim,):
                    raise ValueError(f"place {p.id}: colour of shape {c.shape}, expected "
                                     f"({p.colour_dim},)")
            out[p.id] = cols
        return out


@dataclass(frozen=True)
class TransitionArcs:
    """Arc structure of one transition in place indices."""

    inputs: tuple[int, ...]        # ordinary + enabling, in arc order
    input_kinds: tuple[str, ...]
    inhibitors: tuple[int, ...]
    outputs: tuple[int, ...]
    layout: ArcLayout

    @property
    def consumed(self) -> tuple[int, ...]:
        return tuple(p for p, k in zip(self.inputs, self.input_kinds) if k == "ordinary")


@dataclass(frozen=True)
class Violation:
    code: str
    element: str
    message: str

    def __str__(self):
        return f"{self.code} [{self.element}]: {self.message}"


class ModelError(ValueError):
    pass


class SdcpnModel:
    """An SDCPN: places, transitions, arcs and an initial marking.

    Construction never fails on structural problems; :func:`validate`
    reports them.  ``modes`` optionally names marking vectors (used as mode
    labels by the mappings).
    """

    def __init__(self, places: Sequence[Place], transitions: Sequence[Transition],
                 arcs: Sequence[Arc], initial: InitialMarking | None = None,
                 name: str = "sdcpn", modes: dict[str, tuple[int, ...]] | None = None,
                 metric: str = "euclidean"):
        self.places = tuple(places)
        self.transitions = tuple(transitions)
        self.arcs = tuple(arcs)
        self.initial = initial if initial is not None else InitialMarking()
        self.name = name
        self.modes = dict(modes or {})
        self.metric = metric
        self.source_hash: str | None = None
        self.place_index = {p.id: i for i, p in enumerate(self.places)}
        self.transition_index = {t.id: i for i, t in enumerate(self.transitions)}
        self._structure: dict[str, TransitionArcs] = {}
        self._firing: dict[str, FiringMeasure] = {}
        self._binding_errors: dict[str, str] = {}
        self._index()

    def _index(self):
        for t in self.transitions:
            ins, kinds, inh, outs = [], [], [], []
            for a in self.arcs:
                if a.target == t.id and a.source in self.place_index:
                    p = self.place_index[a.source]
                    if a.kind == "inhibitor":
                        inh.append(p)
                    elif a.kind in ("ordinary", "enabling"):
                        ins.append(p)
                        kinds.append(a.kind)
                elif a.source == t.id and a.target in self.place_index:
                    outs.append(self.place_index[a.target])
            layout = ArcLayout(tuple(self.places[p].colour_dim for p in ins), tuple(kinds),
                               tuple(self.places[p].colour_dim for p in outs))
            self._structure[t.id] = TransitionArcs(tuple(ins), tuple(kinds), tuple(inh),
                                                   tuple(outs), layout)
            try:
                if t.firing is None:
                    fm = dirac_firing(layout)
                elif isinstance(t.firing, FiringMeasure):
                    fm = t.firing
                else:
                    fm = t.firing(layout)
                self._firing[t.id] = fm
            except CatalogError as exc:
                self._binding_errors[t.id] = str(exc)

    # -- structure --------------------------------------------------------
    def arcs_of(self, tid: str) -> TransitionArcs:
        return self._structure[tid]

    def firing(self, tid: str) -> FiringMeasure:
        try:
            return self._firing[tid]
        except KeyError:
            raise ModelError(f"transition {tid}: {self._binding_errors.get(tid, 'no firing measure')}") from None

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(p.colour_dim for p in self.places)

    def initial_counts(self) -> tuple[int, ...]:
        return tuple(int(self.initial.counts.get(p.id, 0)) for p in self.places)

    def mode_name(self, counts) -> str | None:
        counts = tuple(int(c) for c in counts)
        for name, vec in self.modes.items():
            if tuple(vec) == counts:
                return name
        return None

    def __repr__(self):
        return (f"SdcpnModel({self.name!r}, places={len(self.places)}, "
                f"transitions={len(self.transitions)}, arcs={len(self.arcs)})")


def validate(model: SdcpnModel) -> list[Violation]:
    """All structural problems of ``model``; empty list when well formed."""
    out: list[Violation] = []
    seen: dict[tuple[str, str], str] = {}
    for kind, items in (("place", model.places), ("transition", model.transitions),
                        ("arc", model.arcs)):
        for item in items:
            key = ("arc" if kind == "arc" else "node", item.id)
            if key in seen:
                out.append(Violation("duplicate id", item.id, f"{kind} id already used by a {seen[key]}"))
            seen[key] = kind

    for p in model.places:
        if p.colour_dim < 0:
            out.append(Violation("colour dimension", p.id, "negative colour dimension"))
        has_dyn = p.drift is not None or p.diffusion is not None
        if p.colour_dim == 0 and has_dyn:
            out.append(Violation("colour dimension", p.id, "colourless place with drift or diffusion"))
        if p.colour_dim > 0 and (p.drift is None or p.diffusion is None):
            out.append(Violation("colour dimension", p.id, "coloured place needs drift and diffusion"))
        if p.colour_dim > 0 and p.drift is not None:
            dim = getattr(p.drift, "dim", None)
            if dim is not None and dim != p.colour_dim:
                out.append(Violation("colour dimension", p.id,
                                     f"drift acts on R^{dim}, place colour is R^{p.colour_dim}"))
        if p.colour_dim > 0 and p.diffusion is not None:
            shape = getattr(p.diffusion, "matrix", None)
            if shape is not None:
                shape = shape.shape
                if shape != (p.colour_dim, p.brownian_dim):
                    out.append(Violation("colour dimension", p.id,
                                         f"diffusion is {shape}, expected ({p.colour_dim}, {p.brownian_dim})"))

    for t in model.transitions:
        if t.kind not in TRANSITION_KINDS:
            out.append(Violation("transition kind", t.id, f"unknown kind {t.kind!r}"))
            continue
        if (t.kind == "guard") != (t.guard is not None):
            out.append(Violation("transition kind", t.id, "guard present iff kind is guard"))
        if (t.kind == "delay") != (t.delay_rate is not None):
            out.append(Violation("transition kind", t.id, "delay rate present iff kind is delay"))
        s = model.arcs_of(t.id)
        if t.kind in ("guard", "delay") and not s.inputs:
            out.append(Violation("pre-enabling impossible", t.id,
                                 f"{t.kind} transition without ordinary or enabling input arc"))
        if t.kind == "guard" and t.guard is not None:
            gdim = getattr(t.guard, "dim", None)
            cdim = sum(s.layout.in_dims)
            if gdim is not None and gdim != cdim:
                out.append(Violation("colour dimension", t.id,
                                     f"guard acts on R^{gdim}, input colour is R^{cdim}"))
        if t.id in model._binding_errors:
            out.append(Violation("firing measure", t.id, model._binding_errors[t.id]))
        else:
            fm = model.firing(t.id)
            n_out = len(s.outputs)
            for e in fm.support:
                if len(e) != n_out or any(v not in (0, 1) for v in e):
                    out.append(Violation("firing measure", t.id,
                                         f"support element {e} is not a 0/1 vector over {n_out} output arcs"))
                    break

    for a in model.arcs:
        if a.kind not in ARC_KINDS:
            out.append(Violation("arc kind", a.id, f"unknown kind {a.kind!r}"))
        src_p, src_t = a.source in model.place_index, a.source in model.transition_index
        dst_p, dst_t = a.target in model.place_index, a.target in model.transition_index
        if not (src_p or src_t) or not (dst_p or dst_t):
            out.append(Violation("unknown node", a.id, f"{a.source} -> {a.target}"))
            continue
        if (src_p and dst_p) or (src_t and dst_t):
            out.append(Violation("not bipartite", a.id, f"{a.source} -> {a.target}"))
            continue
        if src_t:
            if a.kind == "inhibitor":
                out.append(Violation("inhibitor arc direction", a.id, "inhibitor arc must run place -> transition"))
            elif a.kind == "enabling":
                out.append(Violation("enabling arc direction", a.id, "enabling arc must run place -> transition"))

    for pid, n in model.initial.counts.items():
        if pid not in model.place_index:
            out.append(Violation("initial marking", pid, "unknown place"))
        elif int(n) < 0 or int(n) != n:
            out.append(Violation("initial marking", pid, f"token count {n} is not a natural number"))
        else:
            p = model.places[model.place_index[pid]]
            if n and p.colour_dim > 0 and model.initial.joint is None and not model.initial.colours.get(pid):
                out.append(Violation("initial marking", pid, "tokens without initial colour"))
    for name, vec in model.modes.items():
        if len(vec) != len(model.places):
            out.append(Violation("mode name", name, "marking vector length differs from place count"))
    return out


def check_d1(model: SdcpnModel, sample_count: int = 10_000, radius: float = 1.0,
             rng: np.random.Generator | None = None) -> dict[str, conditions.Estimate]:
    """Growth / Lipschitz estimates of every coloured place's dynamics.

    An entry passes when neither ``growth_unbounded`` nor
    ``lipschitz_unbounded`` is set.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    report = {}
    for p in model.places:
        if p.colour_dim == 0:
            continue
        report[p.id] = conditions.estimate(p.id, p.drift, p.diffusion, p.colour_dim, rng,
                                           sample_count=sample_count, radius=radius)
    return report


def d1_passes(report: dict[str, conditions.Estimate]) -> bool:
    return all(not (e.growth_unbounded or e.lipschitz_unbounded) for e in report.values())
