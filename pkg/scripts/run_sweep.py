#!/usr/bin/env python3
"""Memory-footprint sweep; exits with status 3 when the host cannot page.

Run it under a memory cap smaller than the combined ballast, e.g.

    systemd-run --scope -p MemoryMax=1G python3 scripts/run_sweep.py
"""
import argparse
import json
import logging
import sys

from taskpreempt.config import load_config
from taskpreempt.harness.envprobe import EnvironmentUnsupported
from taskpreempt.harness.report import render_report
from taskpreempt.harness.sweep import footprint_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/sweep-desk.yaml")
    p.add_argument("--out", default="results/sweep-desk")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    try:
        analysis = footprint_sweep(load_config(args.config), args.out)
    except EnvironmentUnsupported as exc:
        print(f"skipped: {exc}", file=sys.stderr)
        sys.exit(3)
    render_report(f"{args.out}/sweep.csv", args.out)
    analysis.pop("environment", None)
    print(json.dumps(analysis, indent=2))


if __name__ == "__main__":
    main()
