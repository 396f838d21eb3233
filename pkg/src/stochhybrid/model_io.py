"""Line-oriented model format and the builtin models.

A document looks like::

    format = 1
    name = airtraffic

    [params]
    delta3 = 2            # numbers, 3/2 rationals, sym:name symbols, [..] arrays
    X0 = [0, 0, 1, 1, 0, 0.15]

    [places]
    P1 : colour=6 brownian=3 drift=affine(A1, b1) diffusion=constant(W1)
    P3

    [transitions]
    T3 : delay rate=const(delta3)
    T7 : guard set=box(land_lo, land_hi) firing=dirac()
    T1a : immediate

    [arcs]
    P3 -> T3 : ordinary
    P1 -> T1a            # kind defaults to ordinary

    [initial]
    P1 : 1 colour=fixed(X0)

    [modes]
    V1 = 1 0 0 1 0 1 0

Function arguments are parameter names or inline literals.
"""
from __future__ import annotations

import ast
import hashlib
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import sympy

from . import functions as fn
from .functions import CatalogError, Context, FunctionRef
from .sdcpn_model import Arc, InitialMarking, Place, SdcpnModel, Transition, validate

FORMAT_VERSION = 1
SECTIONS = ("params", "places", "transitions", "arcs", "initial", "modes")


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        where = f"line {line}" + (f", column {column}" if column else "") if line else "model"
        super().__init__(f"{where}: {message}")


@dataclass
class PlaceDecl:
    id: str
    colour: int = 0
    brownian: int = 0
    drift: FunctionRef | None = None
    diffusion: FunctionRef | None = None
    line: int = field(default=0, compare=False)


@dataclass
class TransitionDecl:
    id: str
    kind: str
    fn: FunctionRef | None = None  # guard set or delay rate
    firing: FunctionRef | None = None
    line: int = field(default=0, compare=False)


@dataclass
class ArcDecl:
    source: str
    target: str
    kind: str = "ordinary"
    line: int = field(default=0, compare=False)


@dataclass
class InitialDecl:
    place: str
    count: int
    colour: FunctionRef | None = None
    line: int = field(default=0, compare=False)


@dataclass
class ModelDocument:
    name: str = "model"
    version: int = FORMAT_VERSION
    params: dict[str, Any] = field(default_factory=dict)
    places: list[PlaceDecl] = field(default_factory=list)
    transitions: list[TransitionDecl] = field(default_factory=list)
    arcs: list[ArcDecl] = field(default_factory=list)
    initial: list[InitialDecl] = field(default_factory=list)
    modes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def with_params(self, **values) -> "ModelDocument":
        unknown = set(values) - set(self.params)
        if unknown:
            raise ParseError(f"unknown parameter(s) {sorted(unknown)}")
        params = dict(self.params)
        params.update(values)
        return replace(self, params=params)

    def hash(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()


# ------------------------------------------------------------------ values
_NUM = re.compile(r"^[+-]?(\d+\.?\d*([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?|inf)$")
_RAT = re.compile(r"^[+-]?\d+/\d+$")
_CALL = re.compile(r"^([A-Za-z_][\w.-]*)\s*(?:\((.*)\))?$")
_ID = re.compile(r"^[A-Za-z_][\w.-]*$")


def parse_value(text: str):
    """Scalar (int/float/Fraction/sympy symbol) or numeric array literal."""
    text = text.strip()
    if text.startswith("sym:"):
        name = text[4:].strip()
        if not _ID.match(name):
            raise ValueError(f"bad symbol name {name!r}")
        return sympy.Symbol(name, positive=True)
    if _RAT.match(text):
        return Fraction(text)
    if _NUM.match(text):
        if text.lstrip("+-") == "inf":
            return float(text)
        v = float(text)
        return int(text) if re.match(r"^[+-]?\d+$", text) else v
    if text.startswith("["):
        src = re.sub(r"(?<![\w.])inf\b", "1e999", text)
        src = re.sub(r"(\d+)/(\d+)", lambda m: repr(int(m.group(1)) / int(m.group(2))), src)
        try:
            val = ast.literal_eval(src)
        except (ValueError, SyntaxError) as exc:
            raise ValueError(f"bad array literal {text!r}") from exc
        arr = np.asarray(val, dtype=float)
        if arr.dtype == object:
            raise ValueError(f"ragged array literal {text!r}")
        return arr
    raise ValueError(f"cannot read value {text!r}")


def format_value(v) -> str:
    if isinstance(v, sympy.Basic):
        return f"sym:{v}"
    if isinstance(v, Fraction):
        return str(v) if v.denominator != 1 else str(v.numerator)
    if isinstance(v, (bool, np.bool_)):
        raise ValueError("booleans are not model values")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt_float(float(v))
    arr = np.asarray(v, dtype=float)
    return _fmt_array(arr)


def _fmt_float(x: float) -> str:
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    r = repr(float(x))
    return r if ("." in r or "e" in r or "inf" in r) else r + ".0"


def _fmt_array(a: np.ndarray) -> str:
    if a.ndim == 0:
        return _fmt_float(float(a))
    return "[" + ", ".join(_fmt_array(x) for x in a) + "]"


def _parse_call(text: str, line: int, col: int) -> FunctionRef:
    m = _CALL.match(text.strip())
    if not m:
        raise ParseError(f"bad function reference {text!r}", line, col)
    args = m.group(2)
    parts = _split_args(args) if args and args.strip() else []
    return FunctionRef(m.group(1), tuple(a.strip() for a in parts))


def _split_args(s: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in s:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return out


_ATTR = re.compile(r"([A-Za-z_]\w*)=([A-Za-z_][\w.-]*\([^()]*\)|\S+)")


def _attrs(text: str, line: int, base_col: int, allowed) -> dict[str, tuple[str, int]]:
    out = {}
    pos = 0
    text_stripped = text.rstrip()
    while pos < len(text_stripped):
        if text_stripped[pos].isspace():
            pos += 1
            continue
        m = _ATTR.match(text_stripped, pos)
        if not m:
            raise ParseError(f"expected key=value, got {text_stripped[pos:]!r}", line, base_col + pos + 1)
        key = m.group(1)
        if key not in allowed:
            raise ParseError(f"unknown attribute {key!r}", line, base_col + pos + 1)
        if key in out:
            raise ParseError(f"duplicate attribute {key!r}", line, base_col + pos + 1)
        out[key] = (m.group(2), base_col + m.start(2) + 1)
        pos = m.end()
    return out


# ------------------------------------------------------------------- parse
def parse_document(text: str) -> ModelDocument:
    doc = ModelDocument()
    section = None
    seen_sections = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indent = len(line) - len(line.lstrip())
        body = line.strip()
        if body.startswith("["):
            m = re.match(r"^\[\s*([A-Za-z_]+)\s*\]$", body)
            if not m:
                raise ParseError(f"bad section header {body!r}", lineno, indent + 1)
            name = m.group(1)
            if name not in SECTIONS:
                raise ParseError(f"unknown section [{name}]", lineno, indent + 2)
            if name in seen_sections:
                raise ParseError(f"section [{name}] appears twice", lineno, indent + 2)
            seen_sections.add(name)
            section = name
            continue
        if section is None:
            key, _, val = body.partition("=")
            key, val = key.strip(), val.strip()
            if key == "format":
                if val != str(FORMAT_VERSION):
                    raise ParseError(f"unsupported format version {val}", lineno, indent + 1)
                doc.version = int(val)
            elif key == "name" and val:
                doc.name = val
            else:
                raise ParseError(f"unexpected header line {body!r}", lineno, indent + 1)
            continue
        handler = _HANDLERS[section]
        handler(doc, body, lineno, indent)
    if not doc.places:
        raise ParseError("no places")
    return doc


def _head(body: str, lineno: int, indent: int):
    ident, sep, rest = body.partition(":")
    ident = ident.strip()
    if not _ID.match(ident):
        raise ParseError(f"bad identifier {ident!r}", lineno, indent + 1)
    col = indent + len(body) - len(rest) + 1 if sep else indent + len(body) + 1
    return ident, rest, col


def _place(doc, body, lineno, indent):
    ident, rest, col = _head(body, lineno, indent)
    a = _attrs(rest, lineno, col - 1, ("colour", "brownian", "drift", "diffusion"))
    decl = PlaceDecl(ident, line=lineno)
    for key in ("colour", "brownian"):
        if key in a:
            txt, c = a[key]
            if not re.match(r"^\d+$", txt):
                raise ParseError(f"{key} must be a natural number", lineno, c)
            setattr(decl, key, int(txt))
    for key in ("drift", "diffusion"):
        if key in a:
            txt, c = a[key]
            setattr(decl, key, _parse_call(txt, lineno, c))
    doc.places.append(decl)


def _transition(doc, body, lineno, indent):
    ident, rest, col = _head(body, lineno, indent)
    words = rest.split(None, 1)
    if not words or words[0] not in ("guard", "delay", "immediate"):
        raise ParseError("transition kind must be guard, delay or immediate", lineno, col)
    kind = words[0]
    tail = words[1] if len(words) > 1 else ""
    tail_col = col + len(rest) - len(tail)
    allowed = {"guard": ("set", "firing"), "delay": ("rate", "firing"), "immediate": ("firing",)}[kind]
    a = _attrs(tail, lineno, tail_col - 1, allowed)
    decl = TransitionDecl(ident, kind, line=lineno)
    key = {"guard": "set", "delay": "rate"}.get(kind)
    if key:
        if key not in a:
            raise ParseError(f"{kind} transition needs {key}=...", lineno, col)
        decl.fn = _parse_call(a[key][0], lineno, a[key][1])
    if "firing" in a:
        decl.firing = _parse_call(a["firing"][0], lineno, a["firing"][1])
    doc.transitions.append(decl)


def _arc(doc, body, lineno, indent):
    m = re.match(r"^([\w.-]+)\s*->\s*([\w.-]+)\s*(?::\s*(\w+))?\s*$", body)
    if not m:
        raise ParseError("arc must read 'SOURCE -> TARGET : kind'", lineno, indent + 1)
    kind = m.group(3) or "ordinary"
    if kind not in ("ordinary", "enabling", "inhibitor"):
        raise ParseError(f"unknown arc kind {kind!r}", lineno, indent + m.start(3) + 1)
    doc.arcs.append(ArcDecl(m.group(1), m.group(2), kind, lineno))


def _initial(doc, body, lineno, indent):
    ident, rest, col = _head(body, lineno, indent)
    words = rest.split(None, 1)
    if not words or not re.match(r"^\d+$", words[0]):
        raise ParseError("initial entry needs a token count", lineno, col)
    tail = words[1] if len(words) > 1 else ""
    a = _attrs(tail, lineno, col + len(rest) - len(tail) - 1, ("colour",))
    ref = _parse_call(a["colour"][0], lineno, a["colour"][1]) if "colour" in a else None
    doc.initial.append(InitialDecl(ident, int(words[0]), ref, lineno))


def _param(doc, body, lineno, indent):
    key, sep, val = body.partition("=")
    key = key.strip()
    if not sep or not _ID.match(key):
        raise ParseError("parameter must read 'name = value'", lineno, indent + 1)
    if key in doc.params:
        raise ParseError(f"parameter {key!r} defined twice", lineno, indent + 1)
    try:
        doc.params[key] = parse_value(val)
    except ValueError as exc:
        raise ParseError(str(exc), lineno, indent + body.index("=") + 2) from None


def _mode(doc, body, lineno, indent):
    key, sep, val = body.partition("=")
    key = key.strip()
    if not sep or not _ID.match(key):
        raise ParseError("mode must read 'name = c1 c2 ...'", lineno, indent + 1)
    try:
        vec = tuple(int(v) for v in val.split())
    except ValueError:
        raise ParseError("mode marking must be integers", lineno, indent + body.index("=") + 2) from None
    doc.modes[key] = vec


_HANDLERS = {"params": _param, "places": _place, "transitions": _transition, "arcs": _arc,
             "initial": _initial, "modes": _mode}


# --------------------------------------------------------------- serialize
def _ref_text(ref: FunctionRef) -> str:
    return f"{ref.name}({', '.join(ref.args)})"


def serialize(doc: ModelDocument | SdcpnModel) -> str:
    """Canonical text of a document (or of the document a model came from)."""
    if isinstance(doc, SdcpnModel):
        src = getattr(doc, "document", None)
        if src is None:
            raise ValueError("model was not built from a document")
        doc = src
    out = [f"format = {doc.version}", f"name = {doc.name}", ""]
    if doc.params:
        out.append("[params]")
        out += [f"{k} = {format_value(v)}" for k, v in doc.params.items()]
        out.append("")
    out.append("[places]")
    for p in doc.places:
        attrs = []
        if p.colour:
            attrs.append(f"colour={p.colour}")
        if p.brownian:
            attrs.append(f"brownian={p.brownian}")
        if p.drift:
            attrs.append(f"drift={_ref_text(p.drift)}")
        if p.diffusion:
            attrs.append(f"diffusion={_ref_text(p.diffusion)}")
        out.append(p.id + (" : " + " ".join(attrs) if attrs else ""))
    out.append("")
    if doc.transitions:
        out.append("[transitions]")
        for t in doc.transitions:
            parts = [t.kind]
            if t.fn:
                parts.append(("set=" if t.kind == "guard" else "rate=") + _ref_text(t.fn))
            if t.firing:
                parts.append("firing=" + _ref_text(t.firing))
            out.append(f"{t.id} : {' '.join(parts)}")
        out.append("")
    if doc.arcs:
        out.append("[arcs]")
        out += [f"{a.source} -> {a.target} : {a.kind}" for a in doc.arcs]
        out.append("")
    if doc.initial:
        out.append("[initial]")
        for i in doc.initial:
            out.append(f"{i.place} : {i.count}" + (f" colour={_ref_text(i.colour)}" if i.colour else ""))
        out.append("")
    if doc.modes:
        out.append("[modes]")
        out += [f"{k} = {' '.join(str(c) for c in v)}" for k, v in doc.modes.items()]
        out.append("")
    return "\n".join(out)


# ------------------------------------------------------------------- build
def _resolve(doc: ModelDocument, ref: FunctionRef, line: int):
    vals = []
    for a in ref.args:
        if a in doc.params:
            vals.append(doc.params[a])
            continue
        try:
            vals.append(parse_value(a))
        except ValueError:
            raise ParseError(f"unknown parameter {a!r} in {ref.name}(...)", line) from None
    return vals


def _make(kind, doc, ref, ctx, line):
    if not fn.known(kind, ref.name):
        raise ParseError(f"unknown {kind} function {ref.name!r}", line)
    try:
        return fn.make(kind, ref, _resolve(doc, ref, line), ctx)
    except (CatalogError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{kind} {ref.name}: {exc}", line) from None


def build(doc: ModelDocument) -> SdcpnModel:
    """Turn a document into a validated :class:`SdcpnModel`."""
    if not doc.places:
        raise ParseError("no places")
    place_ids = {p.id for p in doc.places}
    trans_ids = {t.id for t in doc.transitions}
    for a in doc.arcs:
        for end in (a.source, a.target):
            if end not in place_ids and end not in trans_ids:
                raise ParseError(f"arc endpoint {end!r} is not a declared place or transition", a.line)
    places = []
    dims = {}
    for p in doc.places:
        ctx = Context(dim=p.colour, brownian_dim=p.brownian)
        drift = diffusion = None
        if p.colour:
            drift = _make("drift", doc, p.drift or FunctionRef("zero"), ctx, p.line)
            diffusion = _make("diffusion", doc, p.diffusion or FunctionRef("zero"), ctx, p.line)
            if getattr(drift, "dim", p.colour) != p.colour:
                raise ParseError(f"place {p.id}: drift dimension {drift.dim} != colour {p.colour}", p.line)
            shape = getattr(diffusion, "matrix", np.zeros((p.colour, p.brownian))).shape
            if shape != (p.colour, p.brownian):
                raise ParseError(f"place {p.id}: diffusion shape {shape} != ({p.colour}, {p.brownian})",
                                 p.line)
        elif p.drift or p.diffusion:
            raise ParseError(f"place {p.id}: colourless place cannot have dynamics", p.line)
        dims[p.id] = p.colour
        places.append(Place(p.id, p.colour, drift, diffusion, p.brownian))

    transitions = []
    arcs = [Arc(f"a{i + 1}", a.kind, a.source, a.target) for i, a in enumerate(doc.arcs)]
    for t in doc.transitions:
        in_dims = sum(dims[a.source] for a in doc.arcs
                      if a.target == t.id and a.kind in ("ordinary", "enabling") and a.source in dims)
        ctx = Context(dim=in_dims)
        guard = rate = None
        if t.kind == "guard":
            guard = _make("guard", doc, t.fn, ctx, t.line)
            if getattr(guard, "dim", in_dims) != in_dims:
                raise ParseError(f"transition {t.id}: guard dimension {guard.dim} != input colour {in_dims}",
                                 t.line)
        elif t.kind == "delay":
            rate = _make("rate", doc, t.fn, ctx, t.line)
        firing = None
        if t.firing is not None:
            fref = t.firing
            if not fn.known("firing", fref.name):
                raise ParseError(f"unknown firing function {fref.name!r}", t.line)
            vals = _resolve(doc, fref, t.line)
            firing = _firing_factory(fref, vals)
        transitions.append(Transition(t.id, t.kind, guard, rate, firing))

    counts, colours = {}, {}
    for i in doc.initial:
        if i.place not in dims:
            raise ParseError(f"initial marking names unknown place {i.place!r}", i.line)
        counts[i.place] = counts.get(i.place, 0) + i.count
        if i.colour is not None:
            sampler = _make("colour", doc, i.colour, Context(dim=dims[i.place]), i.line)
            if getattr(sampler, "dim", dims[i.place]) != dims[i.place]:
                raise ParseError(f"initial colour of {i.place} has the wrong dimension", i.line)
            colours.setdefault(i.place, []).extend([sampler] * max(i.count, 1))
    model = SdcpnModel(places, transitions, arcs, InitialMarking(counts, colours), name=doc.name,
                       modes=doc.modes)
    problems = validate(model)
    if problems:
        raise ParseError("; ".join(str(v) for v in problems))
    model.document = doc
    model.source_hash = doc.hash()
    return model


def _firing_factory(ref: FunctionRef, vals):
    def factory(layout):
        obj = fn.make("firing", ref, vals, Context(layout=layout))
        return replace(obj, ref=ref)
    return factory


def parse(text: str) -> SdcpnModel:
    return build(parse_document(text))


# ---------------------------------------------------------------- builtins
def _model_dir():
    return resources.files("stochhybrid") / "models"


def builtin_names() -> list[str]:
    return sorted(p.name[:-len(".sdcpn")] for p in _model_dir().iterdir() if p.name.endswith(".sdcpn"))


def builtin_document(name: str) -> ModelDocument:
    path = _model_dir() / f"{name}.sdcpn"
    if not path.is_file():
        raise ParseError(f"no builtin model {name!r} (known: {', '.join(builtin_names())})")
    return parse_document(path.read_text())


def load_document(spec: str) -> ModelDocument:
    """``builtin:<name>`` or a file path."""
    if spec.startswith("builtin:"):
        name = spec[len("builtin:"):]
        if name == "airtraffic-nolanding":
            return airtraffic_document(landing=False)
        return builtin_document(name)
    return parse_document(Path(spec).read_text())


def load(spec: str, **params) -> SdcpnModel:
    doc = load_document(spec)
    if params:
        doc = doc.with_params(**params)
    return build(doc)


def airtraffic_document(delta3=None, delta4=None, delta5=None, delta6=None, *, landing: bool = True,
                        symbolic: bool = False, **params) -> ModelDocument:
    doc = builtin_document("airtraffic")
    values = dict(params)
    for k, v in (("delta3", delta3), ("delta4", delta4), ("delta5", delta5), ("delta6", delta6)):
        if symbolic:
            values[k] = sympy.Symbol(k, positive=True)
        elif v is not None:
            values[k] = v
    doc = doc.with_params(**values) if values else doc
    x0 = np.asarray(doc.params["X0"], dtype=float)
    if x0.shape != (6,) or not x0[2] > 0:
        raise ParseError("X0 must be a 6-vector with vertical position in (0, inf)")
    for k in ("delta3", "delta4", "delta5", "delta6"):
        v = doc.params[k]
        if not isinstance(v, sympy.Basic) and not (0 < float(v) < float("inf")):
            raise ParseError(f"{k} must be finite and positive, got {v}")
    if not landing:
        doc = replace(doc, name=doc.name + "-nolanding", transitions=[
            replace(t, fn=FunctionRef("everywhere")) if t.kind == "guard" else t
            for t in doc.transitions])
    return doc


def airtraffic_example(delta3=None, delta4=None, delta5=None, delta6=None, *, landing: bool = True,
                       symbolic: bool = False, **params) -> SdcpnModel:
    """The aircraft evolution net: nominal / non-nominal / landed flight
    phases, engine and navigation systems failing and being repaired.

    Rates default to the shipped values; ``symbolic=True`` makes the four
    rates sympy symbols (for exact kernels); ``landing=False`` replaces the
    landing guards by guards that are never hit.
    """
    return build(airtraffic_document(delta3, delta4, delta5, delta6, landing=landing,
                                     symbolic=symbolic, **params))
