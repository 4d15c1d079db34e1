"""Command line entry point.

Every subcommand writes its reports into --out together with manifest.json,
which records the normalized arguments, input hashes, library versions, the
seed and the sha256 of every output.  Reports contain no timings or paths, so
re-running the same arguments reproduces them byte for byte.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys

import gmpy2
import numpy as np
import scipy

from . import __version__
from .dynamics_model import ModelError, default_model, figure1_model, load_model, model_hash, polar_generator
from .dynamics_model import normalize_leading
from .lyapunov_builder import build_all_wedges
from .measure_lab import density_annulus, invariant_samples, moment_curve, tail_exponent
from .operator_algebra import build_chain
from .region_atlas import default_params, figure1_curves, figure1_params, make_atlas
from .sde_simulator import SimConfig, read_samples, write_samples
from .serialize import atomic_write, csv_text, dumps, file_sha256
from .verifier import abs_function, check_dynkin, square_function, verify_all

COMMANDS = ("decompose", "build", "verify", "simulate", "tail", "density", "dynkin", "figure1")
LADDER_KEYS = ("theta0", "theta1", "phi_star", "eta_star", "r_star")
BUILD_KEYS = ("p", "q", "h", "h_final", "J")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing

def _floats(text: str, count: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")
    if count is not None and len(vals) != count:
        raise argparse.ArgumentTypeError(f"expected {count} numbers, got {len(vals)}")
    return vals


def _annulus(text):
    return _floats(text, 2)


def _bins(text):
    return [int(v) for v in _floats(text, 2)]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", help="model JSON (default: a z^(n+1) with F = 0, a = 1, σ = 1)")
    common.add_argument("--n", type=int, default=1, help="degree of the default model")
    common.add_argument("--params", help="JSON with ladder overrides and p, q, h, J")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    sim = _Parser(add_help=False)
    sim.add_argument("--paths", type=int, default=2000, help="independent chains")
    sim.add_argument("--steps", type=int, default=500, help="recorded states per chain after burn-in")
    sim.add_argument("--burn-in", type=float, default=5.0, help="discarded time per chain")
    sim.add_argument("--thin", type=float, default=0.1, help="time between recorded states")
    sim.add_argument("--dt-max", type=float, default=1e-2)
    sim.add_argument("--eps", type=float, default=0.05, help="step control constant")
    sim.add_argument("--rule", choices=("absolute", "relative"), default="relative")
    sim.add_argument("--samples", help="reuse a sample file written by `simulate`")

    p = _Parser(prog="stabilyze", description="Piecewise Lyapunov functions for noise-stabilized planar ODEs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("decompose", parents=[common], help="coordinate chain and region atlas")
    sub.add_parser("build", parents=[common], help="assemble Ψ for every wedge")
    v = sub.add_parser("verify", parents=[common], help="local Lyapunov, flux signs, symmetry")
    v.add_argument("--r-max", type=float, default=1e6)
    v.add_argument("--boundary-samples", type=int, default=100)
    sub.add_parser("simulate", parents=[common, sim], help="stationary samples")
    t = sub.add_parser("tail", parents=[common, sim], help="Hill tail index and moment frontier")
    t.add_argument("--gamma-list", type=_floats, help="γ values for the moment diagnostic")
    d = sub.add_parser("density", parents=[common, sim], help="scaled density on an annulus")
    d.add_argument("--annulus", type=_annulus, default=[5.0, 10.0], metavar="R1,R2")
    d.add_argument("--bins", type=_bins, default=[8, 16], metavar="NR,NTHETA")
    k = sub.add_parser("dynkin", parents=[common], help="Dynkin flux of a kinked test function")
    k.add_argument("--function", choices=("abs", "square"), default="abs")
    k.add_argument("--paths", type=int, default=100_000)
    k.add_argument("--dt", type=float, default=1e-3)
    k.add_argument("--times", type=_floats, default=[0.5, 1.0, 2.0])
    f = sub.add_parser("figure1", parents=[common], help="region boundaries for the worked n=3 example")
    f.add_argument("--r-max", type=float, default=1e4)
    f.add_argument("--count", type=int, default=400)
    return p


# ---------------------------------------------------------------- helpers

def _load_params(path):
    if not path:
        return {}
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - set(LADDER_KEYS) - set(BUILD_KEYS)
    if unknown:
        raise UsageError(f"unknown parameter keys: {sorted(unknown)}")
    return raw


def _model(args):
    return load_model(args.model) if args.model else default_model(args.n)


def _build_kwargs(params: dict) -> dict:
    from .serialize import rational
    kw = {"overrides": {k: float(params[k]) for k in LADDER_KEYS if k in params}}
    for k in ("p", "q"):
        if k in params:
            kw[k] = rational(params[k])
    for k in ("h", "h_final"):
        if k in params:
            kw[k] = float(params[k])
    if "J" in params:
        kw["J"] = int(params["J"])
    return kw


def versions() -> dict:
    return {"stabilyze": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "gmpy2": gmpy2.version()}


class Run:
    """Collects outputs and writes the manifest last."""

    def __init__(self, args, argv):
        self.args = args
        self.out = args.out
        self.outputs = {}
        self.argv = _normalized(argv)

    def write(self, name: str, data) -> None:
        self.outputs[name] = atomic_write(os.path.join(self.out, name), data)

    def write_file(self, name: str) -> None:
        self.outputs[name] = file_sha256(os.path.join(self.out, name))

    def manifest(self, extra: dict | None = None) -> dict:
        inputs = {}
        for key in ("model", "params", "samples"):
            path = getattr(self.args, key, None)
            if path:
                inputs[key] = {"name": os.path.basename(path), "sha256": file_sha256(path)}
        m = {"command": self.args.command, "argv": self.argv, "inputs": inputs, "seed": self.args.seed,
             "versions": versions(), "outputs": dict(sorted(self.outputs.items())), **(extra or {})}
        atomic_write(os.path.join(self.out, "manifest.json"), dumps(m))
        return m


def _normalized(argv):
    """argv without --out, so manifests of reruns into other directories match."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def _say(args, text):
    if args.verbose:
        print(text, file=sys.stderr)


# ---------------------------------------------------------------- commands

def cmd_decompose(args, run: Run) -> int:
    model = _model(args)
    params = _load_params(args.params)
    norm, lam = normalize_leading(model)
    chain = build_chain(polar_generator(norm, params.get("J")), norm.n)
    atlas = make_atlas(chain, default_params(chain, **_build_kwargs(params)["overrides"]))
    rep = {"model": model.to_dict(), "model_hash": model_hash(model), "normalization": complex(lam),
           "chain": chain.to_dict(), "atlas": atlas.to_dict()}
    run.write("decompose.json", dumps(rep))
    print(f"n={chain.n} j={chain.j} c={[str(c) for c in chain.c]} gamma1={[str(g) for g in chain.gamma1]}")
    return 0


def cmd_build(args, run: Run) -> int:
    model = _model(args)
    psis = build_all_wedges(model, **_build_kwargs(_load_params(args.params)))
    rep = {"model": model.to_dict(), "model_hash": model_hash(model), "wedges": [p.to_dict() for p in psis]}
    run.write("build.json", dumps(rep))
    print(f"built {len(psis)} wedge(s); symmetry residual "
          f"{max(p.symmetry_residuals['psi_top'] for p in psis):.2e}")
    return 0


def cmd_verify(args, run: Run) -> int:
    model = _model(args)
    psis = build_all_wedges(model, **_build_kwargs(_load_params(args.params)))
    # each wedge is checked against its own normalized, rotated model
    reports = [verify_all(p, None, r_max=args.r_max, samples_per_boundary=args.boundary_samples) for p in psis]
    ok = all(r.ok for r in reports)
    run.write("verify.json", dumps({"model_hash": model_hash(model), "ok": ok,
                                    "wedges": [r.to_dict() for r in reports]}))
    for i, r in enumerate(reports):
        print(f"wedge {i}")
        print(r.text(), end="")
    return 0 if ok else 1


def _samples(args):
    if getattr(args, "samples", None):
        from .sde_simulator import SampleSet
        z, meta = read_samples(args.samples)
        return SampleSet(samples=z, burn_in=meta.get("burn_in", 0.0), thin=meta.get("thin", 0.0),
                         seed=meta.get("seed", 0), scheme=meta.get("scheme", ""),
                         model_hash=meta.get("model_hash", ""), path_count=meta.get("path_count", 1),
                         flagged_count=meta.get("flagged_count", 0), steps=meta.get("steps", 0),
                         ess=float(meta.get("ess", z.size)), per_path=meta.get("per_path", 0),
                         extra={"n": meta.get("n"), "sigma": meta.get("sigma"), "T": meta.get("T")})
    model = _model(args)
    T = args.burn_in + args.steps * args.thin
    cfg = SimConfig(dt_max=args.dt_max, rule=args.rule, eps_c=args.eps, T=T, seed=args.seed,
                    path_count=args.paths)
    return invariant_samples(model, cfg, args.burn_in, args.thin)


def cmd_simulate(args, run: Run) -> int:
    s = _samples(args)
    os.makedirs(args.out, exist_ok=True)
    write_samples(os.path.join(args.out, "samples.bin"), s.samples, s.meta())
    run.write_file("samples.bin")
    run.write_file("samples.bin.json")
    print(f"{s.samples.size} samples, ESS {s.ess:.4g}, {s.steps} steps, {s.flagged_count} flagged")
    return 0


def cmd_tail(args, run: Run) -> int:
    s = _samples(args)
    rep = tail_exponent(s)
    out = {"samples": s.meta(), "tail": rep.to_dict()}
    if args.gamma_list:
        out["moments"] = moment_curve(s, args.gamma_list)
    run.write("tail.json", dumps(out))
    print(f"Hill α = {rep.estimate:.4f} CI [{rep.ci[0]:.4f}, {rep.ci[1]:.4f}] at k={rep.k}; "
          f"target {rep.target:g}: {rep.verdict}")
    if args.gamma_list:
        print(f"moment frontier {out['moments']['frontier']:g}")
    return 0 if rep.verdict == "pass" else 1


def cmd_density(args, run: Run) -> int:
    s = _samples(args)
    R1, R2 = args.annulus
    rep = density_annulus(s, R1, R2, args.bins[0], args.bins[1], seed=args.seed)
    run.write("density.json", dumps({"samples": s.meta(), "density": rep.to_dict()}))
    run.write("density.csv", rep.csv())
    print(f"min c_hat {rep.min_c_hat:.4g}, lower bound {rep.lower_cb:.4g}")
    return 0 if rep.lower_cb > 0 else 1


def cmd_dynkin(args, run: Run) -> int:
    phi = abs_function() if args.function == "abs" else square_function()
    rep = check_dynkin(phi, t_grid=args.times, N=args.paths, seed=args.seed, dt=args.dt)
    run.write("dynkin.json", dumps({"function": args.function, **rep}))
    for row in rep["rows"]:
        print(f"t={row['t']:g}: flux {row['flux']:.5g} ± {row['se']:.2g}")
    return 1 if rep["violations"] else 0


def cmd_figure1(args, run: Run) -> int:
    model = load_model(args.model) if args.model else figure1_model()
    params = _load_params(args.params)
    norm, _ = normalize_leading(model)
    chain = build_chain(polar_generator(norm), norm.n)
    over = _build_kwargs(params)["overrides"]
    atlas = make_atlas(chain, default_params(chain, **over) if over else figure1_params(chain))
    rows = figure1_curves(atlas, r_max=args.r_max, count=args.count)
    run.write("figure1.csv", csv_text(["curve", "r", "theta"], rows))
    run.write("figure1.json", dumps({"model": model.to_dict(), "c": list(chain.c), "gamma1": list(chain.gamma1),
                                     "params": atlas.params.to_dict(),
                                     "curves": sorted({r[0] for r in rows})}))
    print(f"c = {[str(c) for c in chain.c]}, gamma1 = {[str(g) for g in chain.gamma1]}; "
          f"{len(rows)} points written")
    return 0


def replay_manifest(path: str, out: str) -> dict:
    """Re-run the arguments recorded in a manifest into `out` and compare output hashes."""
    with open(path) as fh:
        old = json.load(fh)
    code = main(list(old["argv"]) + ["--out", out])
    with open(os.path.join(out, "manifest.json")) as fh:
        new = json.load(fh)
    match = {k: new["outputs"].get(k) == v for k, v in old["outputs"].items()}
    return {"exit_code": code, "outputs": match, "identical": bool(match) and all(match.values())}


HANDLERS = {"decompose": cmd_decompose, "build": cmd_build, "verify": cmd_verify, "simulate": cmd_simulate,
            "tail": cmd_tail, "density": cmd_density, "dynkin": cmd_dynkin, "figure1": cmd_figure1}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required: {', '.join(COMMANDS)}")
        if getattr(args, "paths", 1) < 1:
            raise UsageError("--paths must be positive")
    except UsageError as e:
        print(f"stabilyze: error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    run = Run(args, argv)
    try:
        code = HANDLERS[args.command](args, run)
    except UsageError as e:
        print(f"stabilyze: error: {e}", file=sys.stderr)
        return 2
    except (ModelError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"stabilyze: {args.command} failed: {e}", file=sys.stderr)
        run.manifest({"status": "error", "error": str(e)})
        return 1
    run.manifest({"status": "ok" if code == 0 else "violations", "exit_code": code})
    _say(args, f"manifest written to {os.path.join(args.out, 'manifest.json')}")
    return code


if __name__ == "__main__":
    sys.exit(main())
