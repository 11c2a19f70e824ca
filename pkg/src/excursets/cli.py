"""Command-line interface.

Sub-commands::

    excursets excursion  --precision Q.mtx --mean mu.csv --level 0 --alpha 0.05 --out DIR
    excursets contour    --covariance C.mtx --mean mu.csv --level 0 --alpha 0.05 --out DIR
    excursets verify     ex1|ex2|ex3 [--scale M] [--draws N] [--methods eb,qc,ni] --out DIR
    excursets rerun      DIR/manifest.json --out DIR2

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 a
verification threshold was not met (or a rerun did not reproduce).
"""

from __future__ import annotations

import argparse
import importlib.metadata
import os
import platform
import sys
import time

import numpy as np

from . import excursions as ex
from . import families as fam
from . import gauss_prob as gp
from . import gmrf
from . import harness as hs
from . import io
from . import plotting
from . import posterior_methods as pm

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4

DIRECTIONS = {"pos": fam.POSITIVE, "neg": fam.NEGATIVE, "avoid": fam.AVOID, "contour": ex.CONTOUR}
INPUT_KEYS = ("precision", "covariance", "mean", "configs", "coords", "spec")
NUMERIC_ERRORS = (gmrf.NotPositiveDefinite, FloatingPointError, hs.ChainDivergence, np.linalg.LinAlgError)


class UsageError(ValueError):
    pass


# -- manifest ------------------------------------------------------------------

def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "matplotlib", "artifact"):
        try:
            out[pkg] = importlib.metadata.version(pkg)
        except importlib.metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _resolved_config(args):
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "out"):
            continue
        if k in INPUT_KEYS and v is not None:
            v = os.path.abspath(v)
        cfg[k] = v
    return cfg


def _manifest_core(args, inputs):
    return {
        "command": args.command,
        "config": _resolved_config(args),
        "inputs": {os.path.abspath(p): io.sha256_file(p) for p in sorted(set(inputs))},
        "seed": args.seed,
        "versions": _versions(),
    }


def _finish(args, core, outputs, t0):
    manifest = dict(core)
    manifest["wall_time"] = round(time.perf_counter() - t0, 3)
    manifest["outputs"] = {os.path.basename(p): io.sha256_file(p) for p in sorted(outputs)}
    io.write_json(os.path.join(args.out, "manifest.json"), manifest)


def _error_report(args, kind, err):
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
        io.write_json(os.path.join(args.out, "error.json"),
                      {"command": args.command, "error": kind, "type": type(err).__name__, "message": str(err)})
    print(f"error: {err}", file=sys.stderr)


# -- excursion / contour ---------------------------------------------------------

def _family(args, direction, u):
    avoiding = direction in (fam.AVOID, ex.CONTOUR)
    kind = args.family or (fam.AVOID_ONE if avoiding else fam.ONE)
    if avoiding != (kind in (fam.AVOID_ONE, fam.AVOID_TWO)):
        raise UsageError(f"family {kind!r} does not fit direction {args.direction!r}")
    coords = None
    if args.coords is not None:
        _, coords = io.read_table(args.coords)
    if kind == fam.TWO_SMOOTH and coords is None:
        raise UsageError("family two-smooth needs --coords")
    fdir = fam.AVOID if avoiding else direction
    return fam.Family(kind, fdir, u, coords=coords), coords


def _load_configs(args):
    if args.configs is not None:
        if args.precision or args.covariance or args.mean:
            raise UsageError("--configs excludes --precision/--covariance/--mean")
        cset, files = io.read_config_set(args.configs)
        return cset, [args.configs, *files]
    if args.mean is None:
        raise UsageError("--mean is required unless --configs is given")
    post = io.read_posterior(args.mean, args.precision, args.covariance)
    files = [args.mean, args.precision or args.covariance]
    return pm.ParamConfigSet.single(post), files


def _set_estimate(result):
    tr = result.trace
    k = int(np.count_nonzero(result.members()[tr.nodes])) if tr.nodes.size else 0
    if k == 0:
        return 1.0, 0.0
    return float(tr.P[k - 1]), float(tr.se[k - 1])


def _run_set(args):
    t0 = time.perf_counter()
    direction = DIRECTIONS[args.direction]
    cset, inputs = _load_configs(args)
    family, coords = _family(args, direction, args.level)
    if coords is not None:
        inputs.append(args.coords)
        if coords.shape[0] != cset.n:
            raise UsageError(f"--coords has {coords.shape[0]} rows but the field has {cset.n} nodes")
    config = gp.IntegrationConfig(n_particles=args.particles, seed=args.seed)
    problem = ex.ExcursionProblem(args.level, args.alpha, direction, family, config)
    result = pm.run_method(args.method, problem, cset)

    os.makedirs(args.out, exist_ok=True)
    core = _manifest_core(args, inputs)
    avoiding = problem.avoiding
    members = result.members()
    rows = []
    for i in range(result.n):
        row = {"node_id": i, "F": repr(float(result.F[i])), "in_set_at_alpha": int(members[i]),
               "marginal_p": repr(float(result.marginal_p[i]))}
        if avoiding:
            row["side"] = int(result.side[i])
            row["Fc"] = repr(float(1.0 - result.F[i]))
        rows.append(row)
    fields = ["node_id", "F", "in_set_at_alpha", "marginal_p"] + (["side", "Fc"] if avoiding else [])
    f_path = os.path.join(args.out, "F.csv")
    io.write_rows(f_path, fields, rows)

    tr = result.trace
    t_path = os.path.join(args.out, "trace.csv")
    io.write_rows(t_path, ["step", "node_id", "side", "P_raw", "se", "P"], [
        {"step": t, "node_id": int(tr.nodes[t]), "side": int(tr.sides[t]), "P_raw": repr(float(tr.P_raw[t])),
         "se": repr(float(tr.se[t])), "P": repr(float(tr.P[t]))}
        for t in range(tr.nodes.size)
    ])

    est, se = _set_estimate(result)
    summary = {
        "n": result.n, "u": args.level, "alpha": args.alpha, "direction": direction,
        "family": family.kind, "method": args.method, "set_size": int(members.sum()),
        "U1_size": int(result.U1.sum()), "L2_size": int(result.L2.sum()),
        "estimate": est, "std_error": se, "family_param": result.family_param,
        "search": [list(s) for s in result.search], "n_class1": int(tr.n_class1),
        "manifest": core,
    }
    if avoiding:
        plus, minus = result.avoiding_sets()
        summary.update(n_above=int(plus.size), n_below=int(minus.size),
                       contour_size=int(result.contour_region().size))
    s_path = os.path.join(args.out, "summary.json")
    io.write_json(s_path, summary)

    outputs = [f_path, t_path, s_path]
    if not args.no_plots:
        p = os.path.join(args.out, "excursion.png")
        plotting.plot_excursion(result, p, coords)
        outputs.append(p)
        if avoiding:
            p = os.path.join(args.out, "contour.png")
            plotting.plot_contour(result, p, coords)
            outputs.append(p)
    _finish(args, core, outputs, t0)
    return EXIT_OK


def cmd_excursion(args):
    return _run_set(args)


def cmd_contour(args):
    if args.direction not in ("avoid", "contour"):
        raise UsageError("contour needs --direction avoid or contour")
    return _run_set(args)


# -- verify ------------------------------------------------------------------------

def _average_reports(reports):
    groups = {}
    for r in reports:
        groups.setdefault((r.method, r.sampler), []).append(r)
    out = []
    for (m, s), rs in groups.items():
        p = np.mean([r.p_hat for r in rs], axis=0)
        se = np.sqrt(np.sum([r.se**2 for r in rs], axis=0)) / len(rs)
        claimed = np.mean([r.claimed for r in rs], axis=0)
        out.append(hs.CoverageReport(rs[0].alphas, p, se, claimed, sum(r.n_draws for r in rs), m, s))
    return out


def cmd_verify(args):
    t0 = time.perf_counter()
    if args.example not in hs.EXAMPLES:
        raise UsageError(f"unknown example {args.example!r}; choose from {', '.join(hs.EXAMPLES)}")
    inputs = []
    if args.spec is not None:
        base = hs.SimSpec.from_json(args.spec)
        if base.example != args.example:
            raise UsageError("spec file is for a different example")
        inputs.append(args.spec)
    else:
        scale = args.scale or (None if args.example == "ex1" else 20)
        base = hs.SimSpec.default(args.example, scale, args.seed)
    config = gp.IntegrationConfig(n_particles=args.particles, seed=args.seed)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if not methods or any(m not in ("eb", "qc", "ni") for m in methods):
        raise UsageError(f"invalid --methods {args.methods!r}")
    os.makedirs(args.out, exist_ok=True)
    core = _manifest_core(args, inputs)
    outputs = []
    if args.example == "ex1":
        out = hs.study_example1(base, args.draws or 50_000, config)
        reports = list(out.reports)
    elif args.example == "ex2":
        specs = [hs.SimSpec.from_dict({**base.to_dict(), "seed": base.seed + r}) for r in range(args.replicates or 20)]
        out = hs.study_example2(specs, alpha=args.alpha, config=config)
        reports = []
        p = os.path.join(args.out, "sizes.csv")
        io.write_rows(p, ["seed", "avoid1", "avoid2"], out.summary["instances"])
        outputs.append(p)
        if not args.no_plots:
            p = os.path.join(args.out, "sizes.png")
            plotting.plot_sizes(out.summary["instances"], p)
            outputs.append(p)
    else:
        specs = [hs.SimSpec.from_dict({**base.to_dict(), "seed": base.seed + r}) for r in range(args.replicates or 10)]
        out = hs.study_example3(specs, args.draws or 10_000, methods, alpha=args.alpha, config=config)
        reports = _average_reports(out.reports)
    if reports:
        p = os.path.join(args.out, "coverage.csv")
        hs.write_coverage_csv(p, reports)
        outputs.append(p)
        if not args.no_plots:
            p = os.path.join(args.out, "coverage.png")
            plotting.plot_coverage(reports, p)
            outputs.append(p)
    p = os.path.join(args.out, "verify.json")
    io.write_json(p, {"example": out.example, "passed": out.passed, "summary": out.summary,
                      "spec": base.to_dict(), "manifest": core})
    outputs.append(p)
    _finish(args, core, outputs, t0)
    print(f"{out.example}: {'PASS' if out.passed else 'FAIL'}")
    return EXIT_OK if out.passed else EXIT_ACCEPTANCE


# -- rerun -------------------------------------------------------------------------

def cmd_rerun(args):
    import json

    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise io.InputError(f"cannot read manifest {args.manifest}: {err}") from err
    for path, digest in manifest["inputs"].items():
        if not os.path.isfile(path) or io.sha256_file(path) != digest:
            raise io.InputError(f"input changed or missing: {path}")
    ns = argparse.Namespace(**manifest["config"])
    ns.out = args.out
    ns.func = COMMANDS[manifest["command"]]
    code = ns.func(ns)
    if code not in (EXIT_OK, EXIT_ACCEPTANCE):
        return code
    with open(os.path.join(args.out, "manifest.json")) as fh:
        fresh = json.load(fh)
    same = fresh["outputs"] == manifest["outputs"]
    print("reproduced" if same else "outputs differ")
    return EXIT_OK if same else EXIT_ACCEPTANCE


COMMANDS = {"excursion": cmd_excursion, "contour": cmd_contour, "verify": cmd_verify, "rerun": cmd_rerun}


# -- parser ------------------------------------------------------------------------

def _alpha(text):
    a = float(text)
    if not 0.0 < a < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return a


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="excursets", description="Excursion sets and contour regions "
                                     "for latent Gaussian fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, default_dir in (("excursion", "pos"), ("contour", "contour")):
        p = sub.add_parser(name, help=f"{name} function and set for a Gaussian posterior")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--precision", help="Matrix Market precision matrix")
        src.add_argument("--covariance", help="Matrix Market covariance matrix")
        p.add_argument("--mean", help="CSV file with the posterior mean")
        p.add_argument("--configs", help="JSON configuration set (replaces matrix and mean)")
        p.add_argument("--coords", help="CSV of node coordinates (plots, two-smooth family)")
        p.add_argument("--level", type=float, default=0.0)
        p.add_argument("--alpha", type=_alpha, default=0.05)
        p.add_argument("--direction", choices=sorted(DIRECTIONS), default=default_dir)
        p.add_argument("--family", choices=list(fam.KINDS), default=None)
        p.add_argument("--method", choices=["eb", "qc", "ni"], default="eb")
        p.add_argument("--particles", type=_positive_int, default=10_000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--no-plots", action="store_true")
        p.add_argument("--out", required=True)
        p.set_defaults(func=COMMANDS[name])

    p = sub.add_parser("verify", help="run a simulation study and check its thresholds")
    p.add_argument("example")
    p.add_argument("--scale", type=_positive_int, default=None, help="lattice side (ex2/ex3) or grid size (ex1)")
    p.add_argument("--methods", default="eb,qc,ni")
    p.add_argument("--draws", type=_positive_int, default=None)
    p.add_argument("--replicates", type=_positive_int, default=None)
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--spec", help="JSON simulation spec")
    p.add_argument("--particles", type=_positive_int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("rerun", help="repeat a run from its manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except NUMERIC_ERRORS as err:
        _error_report(args, "numerical", err)
        return EXIT_NUMERIC
    except (io.InputError, UsageError, ValueError, OSError) as err:
        _error_report(args, "input", err)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
