"""Memory-footprint sweep: paging overhead of suspend/resume as the high task's ballast grows."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import shutil
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from ..config import HarnessConfig
from .envprobe import probe_environment, require_swap_environment
from .runner import ensure_input, resolve_work_factor, run_cell

log = logging.getLogger(__name__)

# worst-case degradations reported for the paper-scale setup (2.5 GB low-priority ballast)
REFERENCE_SOJOURN_DEGRADATION = 0.20
REFERENCE_MAKESPAN_DEGRADATION = 0.12
MIN_RANK_CORRELATION = 0.9

SWEEP_COLUMNS = [
    "high_ballast_bytes", "low_ballast_bytes", "r", "n",
    "swapped_bytes_low", "sojourn_kill_ms", "sojourn_suspend_ms", "makespan_wait_ms", "makespan_suspend_ms",
    "sojourn_degradation", "makespan_degradation",
]


def _drop_caches() -> None:
    try:
        with open("/proc/sys/vm/drop_caches", "w") as fh:
            fh.write("3\n")
    except OSError as exc:
        log.info("could not drop the page cache (%s); continuing", exc)


def sweep_row(high_ballast: int, low_ballast: int, r: float, aggs: dict) -> dict:
    kill, wait, sus = aggs["kill"], aggs["wait"], aggs["suspend_resume"]
    return {
        "high_ballast_bytes": high_ballast,
        "low_ballast_bytes": low_ballast,
        "r": r,
        "n": sus.n,
        "swapped_bytes_low": sus.mean["swapped_bytes_low"],
        "sojourn_kill_ms": kill.mean["sojourn_high_ms"],
        "sojourn_suspend_ms": sus.mean["sojourn_high_ms"],
        "makespan_wait_ms": wait.mean["makespan_ms"],
        "makespan_suspend_ms": sus.mean["makespan_ms"],
        "sojourn_degradation": sus.mean["sojourn_high_ms"] / kill.mean["sojourn_high_ms"] - 1.0,
        "makespan_degradation": sus.mean["makespan_ms"] / wait.mean["makespan_ms"] - 1.0,
    }


def _spearman(x, y) -> float:
    if len(set(x)) < 2 or len(set(y)) < 2:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


def analyze_sweep(rows: Sequence[dict]) -> dict:
    """Monotonicity and rank-correlation checks, plus the comparison against reference values."""
    rows = sorted(rows, key=lambda r: float(r["high_ballast_bytes"]))
    swapped = [float(r["swapped_bytes_low"]) for r in rows]
    soj = [float(r["sojourn_degradation"]) for r in rows]
    mk = [float(r["makespan_degradation"]) for r in rows]
    rho_soj, rho_mk = _spearman(swapped, soj), _spearman(swapped, mk)
    linear = {}
    for name, ys in (("sojourn", soj), ("makespan", mk)):
        if len(set(swapped)) >= 2:
            fit = stats.linregress(swapped, ys)
            linear[name] = {"slope_per_gib": fit.slope * (1 << 30), "r_squared": fit.rvalue ** 2}
    worst = rows[-1] if rows else {}
    return {
        "points": len(rows),
        "swapped_non_decreasing": bool(np.all(np.diff(swapped) >= 0)) if rows else False,
        "spearman_swapped_vs_sojourn_degradation": rho_soj,
        "spearman_swapped_vs_makespan_degradation": rho_mk,
        "rank_correlation_ok": (not math.isnan(rho_soj) and not math.isnan(rho_mk)
                                and rho_soj >= MIN_RANK_CORRELATION and rho_mk >= MIN_RANK_CORRELATION),
        "linear_fit": linear,
        "most_constrained": {
            "high_ballast_bytes": worst.get("high_ballast_bytes"),
            "sojourn_degradation": worst.get("sojourn_degradation"),
            "makespan_degradation": worst.get("makespan_degradation"),
            "reference_sojourn_degradation": REFERENCE_SOJOURN_DEGRADATION,
            "reference_makespan_degradation": REFERENCE_MAKESPAN_DEGRADATION,
        },
    }


def footprint_sweep(config: HarnessConfig, out_dir, env=None, data_dir: Optional[Path] = None) -> dict:
    """Run kill, wait and suspend/resume for every high-task ballast in ``config.sweep``.

    Raises EnvironmentUnsupported when the host cannot make the tasks page.
    """
    sweep = config.sweep
    env = env or probe_environment()
    require_swap_environment(env, sweep.low_ballast_bytes + max(sweep.high_ballast_bytes),
                             sweep.require_swappiness)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = Path(data_dir) if data_dir else out_dir / "data"
    work_factor = resolve_work_factor(config)
    inputs = (
        ensure_input(data_dir, config.low.input_bytes, config.tuple_bytes, config.seed),
        ensure_input(data_dir, config.high.input_bytes, config.tuple_bytes, config.seed + 1),
    )
    scratch = Path(tempfile.mkdtemp(prefix="sweep-", dir=out_dir))
    rows = []
    try:
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            writer.writeheader()
            for b in sorted(sweep.high_ballast_bytes):
                cfg = config.replace(
                    low=dataclasses.replace(config.low, ballast_bytes=sweep.low_ballast_bytes, verify_ballast=True),
                    high=dataclasses.replace(config.high, ballast_bytes=b, verify_ballast=True),
                )
                aggs = {}
                for primitive in ("kill", "wait", "suspend_resume"):
                    if sweep.drop_caches:
                        _drop_caches()
                    _, agg, _ = run_cell(cfg, primitive, sweep.r, sweep.repetitions, scratch, inputs, work_factor)
                    if agg is None:
                        raise RuntimeError(f"every repetition of {primitive} at ballast {b} failed")
                    aggs[primitive] = agg
                row = sweep_row(b, sweep.low_ballast_bytes, sweep.r, aggs)
                writer.writerow(row)
                fh.flush()
                rows.append(row)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    analysis = analyze_sweep(rows)
    analysis["environment"] = env.as_dict()
    with open(out_dir / "sweep-analysis.json", "w") as fh:
        json.dump(analysis, fh, indent=2)
    return analysis
