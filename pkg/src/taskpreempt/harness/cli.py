"""`harness` command line: run / sweep / report / oracle / probe."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..config import HarnessConfig, apply_scale, load_config
from .envprobe import EnvironmentUnsupported, probe_environment
from .oracle import OverheadModel, timeline_oracle


def _config(args) -> HarnessConfig:
    config = load_config(args.config) if args.config else HarnessConfig()
    if getattr(args, "scale", None):
        config = apply_scale(config, args.scale)
    return config


def cmd_run(args) -> int:
    from .report import render_report
    from .runner import run_experiment_matrix

    config = _config(args)
    r_grid = [float(x) for x in args.r.split(",")] if args.r else None
    run_experiment_matrix(config, args.out, reps=args.reps, r_grid=r_grid, data_dir=args.data_dir)
    render_report(f"{args.out}/runs.csv", args.out)
    print(f"wrote {args.out}/runs.csv")
    return 0


def cmd_sweep(args) -> int:
    from .report import render_report
    from .sweep import footprint_sweep

    try:
        analysis = footprint_sweep(_config(args), args.out, data_dir=args.data_dir)
    except EnvironmentUnsupported as exc:
        print(f"sweep skipped: {exc}", file=sys.stderr)
        return 3
    render_report(f"{args.out}/sweep.csv", args.out)
    print(json.dumps({k: v for k, v in analysis.items() if k != "environment"}, indent=2))
    return 0


def cmd_report(args) -> int:
    from .report import SchemaError, render_report

    try:
        result = render_report(args.csv, args.out)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    for w in result["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    for name, path in result["files"].items():
        print(f"{name}: {path}")
    return 0


def cmd_oracle(args) -> int:
    sojourn, makespan = timeline_oracle(args.primitive, args.r, args.dl, args.dh,
                                        OverheadModel(args.cleanup, args.page_penalty))
    print(f"sojourn={sojourn:g} makespan={makespan:g}")
    return 0


def cmd_probe(args) -> int:
    print(json.dumps(probe_environment().as_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="harness", description="Preemption primitive experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the primitive x r x repetition matrix")
    run.add_argument("--config")
    run.add_argument("--out", required=True)
    run.add_argument("--reps", type=int)
    run.add_argument("--r", help="comma-separated r grid, overrides the config")
    run.add_argument("--data-dir", help="where generated inputs are cached")
    scale = run.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="scale", action="store_const", const="desk")
    scale.add_argument("--paper-scale", dest="scale", action="store_const", const="paper")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="memory footprint sweep (needs swap and a memory cap)")
    sw.add_argument("--config")
    sw.add_argument("--out", required=True)
    sw.add_argument("--data-dir")
    sw.set_defaults(func=cmd_sweep, scale=None)

    rep = sub.add_parser("report", help="plots and summary from a CSV")
    rep.add_argument("--csv", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    orc = sub.add_parser("oracle", help="closed-form expected sojourn and makespan")
    orc.add_argument("--primitive", required=True, choices=["wait", "kill", "suspend_resume", "suspend"])
    orc.add_argument("--r", type=float, required=True)
    orc.add_argument("--dl", type=float, required=True, help="low-priority task duration")
    orc.add_argument("--dh", type=float, required=True, help="high-priority task duration")
    orc.add_argument("--cleanup", type=float, default=0.0)
    orc.add_argument("--page-penalty", type=float, default=0.0)
    orc.set_defaults(func=cmd_oracle)

    probe = sub.add_parser("probe", help="print what the host offers for swap experiments")
    probe.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
