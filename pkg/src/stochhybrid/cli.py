"""Command-line front end.

Exit codes: 0 success, 1 model or parse error, 2 checks or statistical
tests rejected, 3 runtime error.  Data go to standard output or ``--out``;
diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .core import ConfigurationError, SolverParams, json_envelope, label_text

EXIT_OK, EXIT_MODEL, EXIT_REJECTED, EXIT_RUNTIME = 0, 1, 2, 3
SEED_ENV = "STOCHHYBRID_SEED"


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _param(text: str):
    from .model_io import parse_value
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), parse_value(v.strip())


def _grid(text: str):
    try:
        step, horizon = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected step:horizon, got {text!r}") from None
    return step, horizon


def _solver_args(p: argparse.ArgumentParser):
    p.add_argument("--dt", type=float, default=1e-3, help="integration step (default 1e-3)")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default ${SEED_ENV} or 0)")
    p.add_argument("--max-immediate", type=int, default=10_000)
    p.add_argument("--max-jumps", type=int, default=100_000)
    p.add_argument("--guard-tol", type=float, default=1e-9)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: CPU count)")


def _model_args(p: argparse.ArgumentParser, positional: bool = False):
    if positional:
        p.add_argument("model_file", nargs="?", help="model file (same as --model)")
    p.add_argument("--model", default=None, help="model file or builtin:<name> (default builtin:airtraffic)")
    p.add_argument("--param", type=_param, action="append", default=[], metavar="NAME=VALUE",
                   help="override a model parameter")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochhybrid", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate an ensemble and write it as CSV")
    _model_args(p)
    _solver_args(p)
    p.add_argument("--backend", choices=("sdcpn", "gshs", "hsde"), default="sdcpn")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--grid", type=float, default=None, help="output grid step (default horizon/10)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("map", help="map a net to a GSHS or HSDE description (JSON)")
    p.add_argument("target", choices=("gshs", "hsde"))
    _model_args(p, positional=True)
    p.add_argument("--max-nodes", type=int, default=10_000)
    p.add_argument("--out", default=None)

    p = sub.add_parser("check", help="condition checks (D1, G1-G4, H1-H8)")
    p.add_argument("which", choices=("d", "g", "h", "all"))
    _model_args(p, positional=True)
    p.add_argument("--budget", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("verify", help="statistical cross-backend comparison")
    _model_args(p)
    _solver_args(p)
    p.add_argument("--backends", default="sdcpn,gshs,hsde")
    p.add_argument("--reps", type=int, default=10_000)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--grid", type=_grid, default=None, metavar="STEP:HORIZON")
    p.add_argument("--oracle", action="store_true",
                   help="also test occupancy against the engine/navigation chain (air-traffic net)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("report", help="render a verify report as a table")
    p.add_argument("report")
    return ap


def _load(args):
    from .model_io import load
    spec = getattr(args, "model_file", None) or args.model or "builtin:airtraffic"
    return load(spec, **dict(args.param))


def _solver(args) -> SolverParams:
    return SolverParams(dt=args.dt, guard_tol=args.guard_tol, max_immediate=args.max_immediate,
                        max_jumps=args.max_jumps)


def _emit(text: str, out):
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def cmd_simulate(args) -> int:
    from .equivalence import run_ensemble
    model = _load(args)
    seed = args.seed if args.seed is not None else _default_seed()
    grid = args.grid if args.grid is not None else args.horizon / 10
    threads = args.threads or 1
    ens = run_ensemble(args.backend, model, args.reps, args.horizon, grid, _solver(args), seed=seed,
                       threads=threads)
    buf = io.StringIO()
    buf.write(f"# backend={args.backend} seed={seed} model_hash={ens.model_hash} "
              f"dt={args.dt} reps={args.reps}\n")
    w = csv.writer(buf, lineterminator="\n")
    n = ens.states.shape[2]
    w.writerow(["rep", "t", "mode", "jumps"] + [f"x{j}" for j in range(n)])
    names = {lab: (model.mode_name(lab) or label_text(lab)) if isinstance(lab, tuple) else label_text(lab)
             for lab in ens.labels}
    for r in range(ens.reps):
        if r in ens.failures:
            continue
        for g, t in enumerate(ens.grid):
            xs = ens.states[r, g]
            w.writerow([r, repr(float(t)), names[ens.labels[ens.modes[r, g]]], int(ens.jump_counts[r])]
                       + ["" if np.isnan(v) else repr(float(v)) for v in xs])
    _emit(buf.getvalue(), args.out)
    for r, (why, key) in sorted(ens.failures.items()):
        print(f"replication {r} failed ({why}); replay with {key}", file=sys.stderr)
    return EXIT_RUNTIME if ens.failures else EXIT_OK


def cmd_map(args) -> int:
    model = _load(args)
    if args.target == "gshs":
        from .gshs import gshs_to_dict, map_sdcpn_to_gshs
        desc = gshs_to_dict(map_sdcpn_to_gshs(model, args.max_nodes))
    else:
        from .hsde import hsde_to_dict, map_sdcpn_to_hsde
        desc = hsde_to_dict(map_sdcpn_to_hsde(model, args.max_nodes))
    _emit(json.dumps(desc, indent=2), args.out)
    return EXIT_OK


def cmd_check(args) -> int:
    from .sdcpn_model import check_d1, d1_passes
    model = _load(args)
    seed = args.seed if args.seed is not None else _default_seed()
    out: dict = {}
    ok = True
    if args.which in ("d", "all"):
        rep = check_d1(model, args.budget, rng=np.random.default_rng(seed))
        passed = d1_passes(rep)
        ok &= passed
        out["D1"] = {"passed": passed, "places": {k: e.as_dict() for k, e in rep.items()}}
    if args.which in ("g", "all"):
        from .gshs import check_g1_g4, map_sdcpn_to_gshs
        rep = check_g1_g4(map_sdcpn_to_gshs(model), args.budget, seed)
        ok &= all(r.passed for r in rep.values())
        out.update({k: r.as_dict() for k, r in rep.items()})
    if args.which in ("h", "all"):
        from .hsde import check_h1_h8, map_sdcpn_to_hsde
        rep = check_h1_h8(map_sdcpn_to_hsde(model), args.budget, seed)
        ok &= all(r.passed for r in rep.values())
        out.update({k: r.as_dict() for k, r in rep.items()})
    _emit(json_envelope(seed, model.source_hash, {}, budget=args.budget, passed=bool(ok), checks=out),
          args.out)
    for name, r in out.items():
        status = "pass" if r["passed"] else "FLAGGED"
        print(f"{name}: {status} (no violation found at budget {args.budget})" if r["passed"]
              else f"{name}: {status}: {'; '.join(r.get('issues', []))}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_REJECTED


def cmd_verify(args) -> int:
    from .equivalence import default_threads, render_table, verify
    model = _load(args)
    seed = args.seed if args.seed is not None else _default_seed()
    step, horizon = args.grid if args.grid is not None else (1.0, args.horizon)
    backends = tuple(b.strip() for b in args.backends.split(",") if b.strip())
    oracle = None
    if args.oracle:
        oracle = {k: float(model.document.params[k]) for k in ("delta3", "delta4", "delta5", "delta6")}
    report = verify(model, backends, args.reps, horizon, step, _solver(args), args.alpha, seed,
                    args.threads or default_threads(), oracle)
    _emit(json.dumps(report, indent=2, default=str), args.out)
    print(render_table(report), file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_REJECTED


def cmd_report(args) -> int:
    from .equivalence import render_table
    with open(args.report, encoding="utf-8") as fh:
        report = json.load(fh)
    print(render_table(report))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "map": cmd_map, "check": cmd_check, "verify": cmd_verify,
            "report": cmd_report}


def main(argv=None) -> int:
    from .conditions import EvaluationError
    from .gshs import MappingError
    from .model_io import ParseError
    from .sdcpn_model import ModelError
    from .functions import CatalogError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ParseError, ModelError, MappingError, CatalogError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (RuntimeError, ArithmeticError, EvaluationError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
