#!/usr/bin/env python3
"""Run the baseline matrix and render plots.

    python3 scripts/run_baseline.py --config configs/desk.yaml --out results/desk
"""
import argparse
import logging

from taskpreempt.config import load_config
from taskpreempt.harness.report import render_report
from taskpreempt.harness.runner import run_experiment_matrix


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.yaml")
    p.add_argument("--out", default="results/desk")
    p.add_argument("--reps", type=int)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    results = run_experiment_matrix(load_config(args.config), args.out, reps=args.reps)
    for (primitive, r), cell in sorted(results.items()):
        agg = cell.aggregate
        if agg is None:
            print(f"{primitive:15s} r={r:.2f} all repetitions failed")
            continue
        print(f"{primitive:15s} r={r:.2f} sojourn {agg.mean['sojourn_high_ms'] / 1000:7.2f}s "
              f"makespan {agg.mean['makespan_ms'] / 1000:7.2f}s spread_ok={agg.spread_ok} ({cell.wall_s:.0f}s)")
    render_report(f"{args.out}/runs.csv", args.out)


if __name__ == "__main__":
    main()
