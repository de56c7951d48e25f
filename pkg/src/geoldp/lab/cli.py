"""Command line entry point ``geoldp``.

Exit codes: 0 success, 2 configuration / usage errors, 3 numerical failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..curves import Curve
from ..dynamics import SimConfig, simulate
from ..errors import ConfigError, ContractViolation, GeoLDPError, NumericalFailure
from ..geometry import CotangentVector, ManifoldPoint, ScalarField
from ..hamiltonian import hamiltonian
from ..models import build_model
from ..variational import ResolventConfig, action, resolvent
from .config import load_config
from .experiments import run_experiment
from .io import save_result, value_record, write_json

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _floats(text):
    try:
        return [float(v) for v in str(text).replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a list of numbers, got '{text}'") from None


def _model(args):
    if args.drift or args.rates:
        return build_model(args.manifold, drift=args.drift, rates=args.rates)
    return build_model(args.manifold, family=args.model)


def _add_model_args(p):
    p.add_argument("--manifold", default="euclidean:1", help="euclidean:<d>, sphere2 or torus2")
    p.add_argument("--model", default="twostate",
                   help="preset family, optionally with parameters, e.g. 'twostate{a: 2}'")
    p.add_argument("--drift", help="drift family spec (overrides --model)")
    p.add_argument("--rates", help="rate family spec (overrides --model)")


def _point(model, text):
    m = model.manifold
    return ManifoldPoint(m, m.check_point(m.project(np.array(_floats(text)))))


def _emit(record, out):
    if out:
        write_json(record, out)
    print(json.dumps(record, sort_keys=True))


def cmd_run(args):
    cfg = load_config(args.config)
    result = run_experiment(cfg)
    prefix = cfg.output
    if prefix is None:
        prefix = Path(args.config).with_suffix("")
    elif not Path(prefix).is_absolute():
        prefix = Path(args.config).resolve().parent / prefix
    if args.output:
        prefix = args.output
    j, c = save_result(result, prefix)
    print(f"{cfg.kind}: wrote {j} and {c}")
    if result.fit:
        print("fit: " + ", ".join(f"{k}={v}" for k, v in result.fit.items()))
    return 0


def cmd_hamiltonian(args):
    model = _model(args)
    x = _point(model, args.x)
    p = np.array(_floats(args.p))
    if p.size != model.dim:
        raise ConfigError(f"--p needs {model.dim} frame components")
    res = hamiltonian(model, x, CotangentVector(x, p))
    inputs = {"model": model.spec, "x": x.coords, "p": p}
    _emit(value_record(inputs, res.eigenvalue, 1e-12,
                       {"right": res.right, "left": res.left, "squarings": res.iterations}),
          args.out)
    return 0


def cmd_rate(args):
    model = _model(args)
    curve = Curve.from_jsonl(args.curve)
    if curve.manifold.name != model.manifold.name:
        raise ConfigError(f"curve lives on {curve.manifold.name}, model on {model.manifold.name}")
    a = action(curve, model)
    inputs = {"model": model.spec, "curve": str(args.curve)}
    _emit(value_record(inputs, a.total, None, {"segments": len(curve) - 1, "T": curve.T}),
          args.out)
    return 0


BUILTIN_H = {
    "cos": lambda X: np.cos(X[..., 0]),
    "constant": lambda X: np.ones(X.shape[:-1]),
    "height": lambda X: X[..., -1],
    "bump": lambda X: np.exp(-np.sum(X[..., :1] ** 2, axis=-1)),
}


def cmd_resolvent(args):
    model = _model(args)
    if args.h not in BUILTIN_H:
        raise ConfigError(f"unknown builtin h '{args.h}' (choose from {', '.join(BUILTIN_H)})")
    h = ScalarField(model.manifold, BUILTIN_H[args.h], name=args.h)
    x = _point(model, args.x) if args.x else ManifoldPoint(
        model.manifold, model.manifold.project(np.eye(model.manifold.amb_dim)[-1]))
    cfg = ResolventConfig(lam=args.lam, curve_grid=args.segments, restarts=args.restarts)
    res = resolvent(cfg, h, x, model)
    inputs = {"model": model.spec, "x": x.coords, "lambda": args.lam, "h": args.h,
              "segments": args.segments, "restarts": args.restarts}
    _emit(value_record(inputs, res.value, None, res.diagnostics), args.out)
    return 0


def cmd_simulate(args):
    model = _model(args)
    x0 = _point(model, args.x0) if args.x0 else ManifoldPoint(
        model.manifold, model.manifold.project(np.eye(model.manifold.amb_dim)[-1]
                                               if model.manifold.kind == "sphere"
                                               else np.zeros(model.manifold.amb_dim)))
    cfg = SimConfig(model, args.n, args.T, x0.coords, seed=args.seed, dt=args.dt)
    path = simulate(cfg, trajectory=args.trajectory)
    if args.out:
        if str(args.out).endswith(".bin"):
            path.to_binary(args.out)
        else:
            path.to_jsonl(args.out)
    print(json.dumps({"steps": cfg.steps, "dt": cfg.dt, "switches": len(path.switch_events),
                      "end": path.positions[-1].tolist(), "out": args.out}))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="geoldp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output", help="override the config's output prefix")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("hamiltonian", help="evaluate H(x, p)")
    p.add_argument("action", choices=["eval"])
    _add_model_args(p)
    p.add_argument("--x", required=True, help="ambient coordinates")
    p.add_argument("--p", required=True, help="frame components of the covector")
    p.add_argument("--out")
    p.set_defaults(func=cmd_hamiltonian)

    p = sub.add_parser("rate", help="action of a curve stored as JSONL")
    _add_model_args(p)
    p.add_argument("--curve", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("resolvent", help="evaluate R(lambda) h at a point")
    _add_model_args(p)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--h", required=True, help=f"builtin: {', '.join(BUILTIN_H)}")
    p.add_argument("--x")
    p.add_argument("--segments", type=int, default=64)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_resolvent)

    p = sub.add_parser("simulate", help="simulate one trajectory")
    _add_model_args(p)
    p.add_argument("--n", type=float, required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--x0")
    p.add_argument("--dt", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectory", type=int, default=0)
    p.add_argument("--out", help="output path (.jsonl or .bin)")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"numerical failure in stage '{exc.stage}': {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ContractViolation, GeoLDPError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
