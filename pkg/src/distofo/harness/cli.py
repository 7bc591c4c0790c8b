"""
Command-line entry point.

    distofo run CONFIG [--arms tau=5 tau=50 centralized] [--out DIR] [--seeds N] [--horizon T]
    distofo bounds CONFIG [--out FILE] [--json]
    distofo optimum CONFIG

Exit codes: 0 success, 2 configuration error, 3 bound hypotheses violated,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, DistOFOError
from .config import RunConfig
from .experiment import bound_report, dumps, resolve_problem, run_experiment, write_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_HYPOTHESIS = 3
EXIT_RUNTIME = 4

log = logging.getLogger("distofo")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distofo", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run Monte Carlo replicas for each arm")
    r.add_argument("config")
    r.add_argument("--arms", nargs="+", help="arms such as tau=5 tau=50 centralized")
    r.add_argument("--out", help="output directory (default: experiment.output_dir)")
    r.add_argument("--seeds", type=int, help="number of replicas")
    r.add_argument("--horizon", type=int, help="iterations per replica")
    r.add_argument("--workers", type=int, help="parallel worker processes")

    b = sub.add_parser("bounds", help="evaluate every convergence bound")
    b.add_argument("config")
    b.add_argument("--out", help="also write the report to this file")
    b.add_argument("--json", action="store_true", help="JSON instead of key = value text")

    o = sub.add_parser("optimum", help="print the optimal input")
    o.add_argument("config")
    return p


def _cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    exp, ctrl = {}, {}
    if args.seeds is not None:
        exp["replicas"] = args.seeds
    if args.workers is not None:
        exp["workers"] = args.workers
    if args.arms:
        exp["arms"] = args.arms
    if args.horizon is not None:
        ctrl["horizon"] = args.horizon
    cfg = cfg.with_overrides(experiment=exp, controller=ctrl)
    out = Path(args.out) if args.out else cfg.base_dir / cfg.experiment["output_dir"]
    result = run_experiment(cfg)
    paths = write_experiment(result, out)
    summary = result.summary()
    for label, entry in summary["arms"].items():
        if "median_plateau" in entry:
            print(f"{label}: initial {entry['initial_mean_rel_err']:.4g}  "
                  f"plateau {entry['mean_curve_plateau']:.4g}  "
                  f"median plateau {entry['median_plateau']:.4g}  "
                  f"failures {len(entry['failures'])}")
        else:
            print(f"{label}: all {len(entry['failures'])} replicas failed")
    print(f"wrote {len(paths)} files to {out}")
    failed = any(not e.get("seeds") for e in summary["arms"].values())
    return EXIT_RUNTIME if failed else EXIT_OK


def _cmd_bounds(args) -> int:
    cfg = RunConfig.load(args.config)
    report = bound_report(cfg)
    text = dumps(report.to_dict()) if args.json else report.to_text()
    if not report.hypotheses_ok:
        print("hypotheses violated", file=sys.stderr)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK if report.hypotheses_ok else EXIT_HYPOTHESIS


def _cmd_optimum(args) -> int:
    cfg = RunConfig.load(args.config)
    prob = resolve_problem(cfg)
    out = {"u_star": prob.u_star.tolist(), "method": prob.optimum.method,
           "residual": prob.optimum.residual, "cross_check": prob.optimum.cross_check}
    if prob.constraint is not None:
        out["lower"] = prob.constraint.lower.tolist()
        out["upper"] = prob.constraint.upper.tolist()
    sys.stdout.write(json.dumps(out, indent=2) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "bounds": _cmd_bounds, "optimum": _cmd_optimum}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DistOFOError as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
