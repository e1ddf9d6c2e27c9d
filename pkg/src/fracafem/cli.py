"""Command-line harness: run experiments, fit rates, dump meshes.

Exit codes: 0 every run converged (zero indicators), 3 at least one run
stopped at its cell budget or iteration cap, 1 on error.
"""

import argparse
import math
import sys

from . import afem, experiments, mesh as mesh_mod


def _parse_s_list(text):
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def cmd_run(args):
    overrides = {}
    if args.theta is not None:
        overrides["theta"] = args.theta
    if args.budget is not None:
        overrides["dof_budget"] = args.budget
    if args.enforce_mesh_condition:
        overrides["enforce_mesh_condition"] = True
    if args.space is not None:
        overrides["space_tag"] = {"bubble": "bubble", "p2": "p2",
                                  "q2": "q2"}[args.space]
    if args.gamma_policy is not None:
        overrides["gamma_policy"] = args.gamma_policy
    s_list = _parse_s_list(args.s) if args.s else None
    paths, summary, results = experiments.run_experiment(
        args.experiment, args.out, s_list=s_list, **overrides)
    worst = 0
    for s, path in sorted(paths.items()):
        res = results[s]
        print(f"s={s}: {res.status}, {len(res.records)} iterations -> {path}")
        if res.status == "error":
            worst = max(worst, 1)
        elif res.status in ("budget", "cap"):
            worst = max(worst, 3)
    print(f"summary -> {summary}")
    return worst


def cmd_rate(args):
    records = afem.records_from_csv(args.infile)
    slope = experiments.estimate_rate(records, window=args.window,
                                      column=args.column)
    print(f"{args.column} rate: {slope:.6f} "
          f"(window {min(args.window, len(records))} of {len(records)})")
    return 0


def cmd_dump_mesh(args):
    spec, s, overrides = experiments.read_config(args.config)
    overrides["max_iterations"] = args.iter + 1
    if spec.isotropic:
        raise SystemExit("dump-mesh supports tensor-product experiments only")
    config = spec.config(s, **overrides)
    result = afem.run(config, keep_meshes=True)
    if args.iter >= len(result.meshes):
        raise SystemExit(
            f"run ended after {len(result.meshes)} iterations, "
            f"iteration {args.iter} was never reached")
    base, _ypart = result.meshes[args.iter]
    text = mesh_mod.dump_mesh(base)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"mesh at iteration {args.iter} -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="fracafem",
        description="Adaptive FEM benchmarks for the spectral fractional "
                    "Laplacian on the truncated cylinder extension.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a predefined experiment")
    run.add_argument("--experiment", required=True,
                     choices=sorted(experiments.EXPERIMENTS))
    run.add_argument("--s", help="comma-separated list of orders, e.g. 0.2,0.8")
    run.add_argument("--theta", type=float, help="bulk-chasing parameter")
    run.add_argument("--budget", type=int, help="cell budget for the loop")
    run.add_argument("--enforce-mesh-condition", action="store_true")
    run.add_argument("--space", choices=["bubble", "p2", "q2"])
    run.add_argument("--gamma-policy", choices=["default", "strong"])
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(func=cmd_run)

    rate = sub.add_parser("rate", help="fit a convergence rate from a run CSV")
    rate.add_argument("--in", dest="infile", required=True)
    rate.add_argument("--window", type=int, default=8)
    rate.add_argument("--column", default="error",
                      choices=["error", "estimator", "oscillation", "tau"])
    rate.set_defaults(func=cmd_rate)

    dump = sub.add_parser("dump-mesh",
                          help="re-run a configured experiment and dump the "
                               "base mesh of one iteration")
    dump.add_argument("--config", required=True)
    dump.add_argument("--iter", type=int, required=True)
    dump.add_argument("--out")
    dump.set_defaults(func=cmd_dump_mesh)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
