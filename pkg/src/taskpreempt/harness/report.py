"""Plots and a markdown summary from harness CSV output."""
from __future__ import annotations

import csv
import logging
import statistics
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .oracle import normalize_primitive  # noqa: E402
from .runner import CSV_COLUMNS  # noqa: E402
from .sweep import SWEEP_COLUMNS, analyze_sweep  # noqa: E402

log = logging.getLogger(__name__)

LABELS = {"wait": "wait", "kill": "kill", "suspend_resume": "suspend/resume"}
STYLES = {"wait": "s--", "kill": "^-.", "suspend_resume": "o-"}


class SchemaError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _float(row, key, line):
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise SchemaError(line, f"column {key!r} is not a number: {row.get(key)!r}") from None


def read_csv(path):
    """Return (kind, rows) where kind is 'baseline', 'sweep' or 'empty'."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            return "empty", []
        if set(SWEEP_COLUMNS) <= set(header):
            kind, numeric = "sweep", SWEEP_COLUMNS
        elif {"kind", "primitive", "r", "sojourn_high_ms", "makespan_ms"} <= set(header):
            kind, numeric = "baseline", None
        else:
            missing = sorted({"kind", "primitive", "r", "sojourn_high_ms", "makespan_ms"} - set(header))
            raise SchemaError(1, f"header is neither a run table nor a sweep table (missing {missing})")
        rows = []
        for line, row in enumerate(reader, start=2):
            if kind == "sweep":
                rows.append({k: _float(row, k, line) for k in numeric})
                continue
            if row["kind"] not in ("run", "aggregate"):
                raise SchemaError(line, f"unknown row kind {row['kind']!r}")
            try:
                row["primitive"] = normalize_primitive(row["primitive"])
            except ValueError as exc:
                raise SchemaError(line, str(exc)) from None
            row["r"] = _float(row, "r", line)
            if row["kind"] == "run" and str(row.get("status", "ok")).startswith("failed"):
                rows.append(row)
                continue
            for key in ("sojourn_high_ms", "makespan_ms"):
                row[key] = _float(row, key, line)
            rows.append(row)
        return (kind if rows else "empty"), rows


def baseline_series(rows):
    """{primitive: [(r, mean, min, max)]} for sojourn and makespan, preferring aggregate rows."""
    aggregates = [r for r in rows if r["kind"] == "aggregate"]
    out = {"sojourn_high_ms": defaultdict(list), "makespan_ms": defaultdict(list)}
    if aggregates:
        for row in aggregates:
            for metric in out:
                lo = row.get(f"{metric}_min") or row[metric]
                hi = row.get(f"{metric}_max") or row[metric]
                out[metric][row["primitive"]].append((row["r"], row[metric], float(lo), float(hi)))
    else:
        cells = defaultdict(list)
        for row in rows:
            if row["kind"] == "run" and not str(row.get("status", "ok")).startswith("failed"):
                cells[(row["primitive"], row["r"])].append(row)
        for (prim, r), runs in cells.items():
            for metric in out:
                values = [x[metric] for x in runs]
                out[metric][prim].append((r, statistics.fmean(values), min(values), max(values)))
    for metric in out:
        for prim in out[metric]:
            out[metric][prim].sort()
    return out


def _line_plot(series: dict, ylabel: str, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for prim in ("wait", "kill", "suspend_resume"):
        points = series.get(prim)
        if not points:
            continue
        xs = [100 * p[0] for p in points]
        ys = [p[1] / 1000 for p in points]
        err = [[(p[1] - p[2]) / 1000 for p in points], [(p[3] - p[1]) / 1000 for p in points]]
        ax.errorbar(xs, ys, yerr=err, fmt=STYLES[prim], capsize=2, label=LABELS[prim])
    ax.set_xlabel("progress of low-priority task at preemption (%)")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if ax.has_data():
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _sweep_plot(rows, path: Path) -> None:
    rows = sorted(rows, key=lambda r: r["high_ballast_bytes"])
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    xs = [r["high_ballast_bytes"] / (1 << 20) for r in rows]
    ax.plot(xs, [100 * r["sojourn_degradation"] for r in rows], "o-", label="sojourn vs kill")
    ax.plot(xs, [100 * r["makespan_degradation"] for r in rows], "s--", label="makespan vs wait")
    ax.set_xlabel("memory allocated by high-priority task (MiB)")
    ax.set_ylabel("degradation (%)")
    ax2 = ax.twinx()
    ax2.bar(xs, [r["swapped_bytes_low"] / (1 << 20) for r in rows], width=(xs[1] - xs[0]) * 0.4 if len(xs) > 1 else 10,
            alpha=0.3, color="gray", label="swapped (low task)")
    ax2.set_ylabel("swapped by low-priority task (MiB)")
    ax.set_title("Overhead vs memory footprint")
    if rows:
        lines, labels = ax.get_legend_handles_labels()
        bars, blabels = ax2.get_legend_handles_labels()
        ax.legend(lines + bars, labels + blabels, loc="upper left")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _baseline_table(series) -> list[str]:
    lines = ["| primitive | r | sojourn (s) mean [min, max] | makespan (s) mean [min, max] |",
             "|---|---|---|---|"]
    soj, mk = series["sojourn_high_ms"], series["makespan_ms"]
    for prim in ("wait", "kill", "suspend_resume"):
        for (r, m, lo, hi), (_, m2, lo2, hi2) in zip(soj.get(prim, []), mk.get(prim, [])):
            lines.append(f"| {LABELS[prim]} | {r:.2f} | {m/1000:.2f} [{lo/1000:.2f}, {hi/1000:.2f}] "
                         f"| {m2/1000:.2f} [{lo2/1000:.2f}, {hi2/1000:.2f}] |")
    return lines


def render_report(csv_path, out_dir) -> dict:
    """Write SVG plots plus summary.md into ``out_dir``; returns paths and warnings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind, rows = read_csv(csv_path)
    warnings = []
    files = {}
    summary = [f"# Report for `{Path(csv_path).name}`", ""]
    if kind == "sweep":
        files["footprint"] = out_dir / "footprint.svg"
        _sweep_plot(rows, files["footprint"])
        a = analyze_sweep(rows)
        worst = a["most_constrained"]
        summary += [
            "| high ballast (MiB) | swapped low (MiB) | sojourn degr. vs kill | makespan degr. vs wait |",
            "|---|---|---|---|",
        ]
        for r in sorted(rows, key=lambda r: r["high_ballast_bytes"]):
            summary.append(f"| {r['high_ballast_bytes'] / (1 << 20):.0f} | {r['swapped_bytes_low'] / (1 << 20):.1f} "
                           f"| {100 * r['sojourn_degradation']:.1f}% | {100 * r['makespan_degradation']:.1f}% |")
        summary += [
            "",
            f"- swapped bytes non-decreasing in ballast: {a['swapped_non_decreasing']}",
            f"- Spearman(swapped, sojourn degradation): {a['spearman_swapped_vs_sojourn_degradation']:.3f}",
            f"- Spearman(swapped, makespan degradation): {a['spearman_swapped_vs_makespan_degradation']:.3f}",
            f"- most constrained point: sojourn {100 * worst['sojourn_degradation']:.1f}% "
            f"(reference {100 * worst['reference_sojourn_degradation']:.0f}%), makespan "
            f"{100 * worst['makespan_degradation']:.1f}% (reference {100 * worst['reference_makespan_degradation']:.0f}%)",
        ]
    else:
        if kind == "empty":
            warnings.append("CSV has no data rows; plots are empty")
            log.warning(warnings[-1])
            series = {"sojourn_high_ms": {}, "makespan_ms": {}}
        else:
            series = baseline_series(rows)
        files["sojourn"] = out_dir / "sojourn_vs_r.svg"
        files["makespan"] = out_dir / "makespan_vs_r.svg"
        _line_plot(series["sojourn_high_ms"], "sojourn time of high-priority task (s)", "Sojourn time",
                   files["sojourn"])
        _line_plot(series["makespan_ms"], "makespan (s)", "Makespan", files["makespan"])
        summary += _baseline_table(series)
        failed = [r for r in rows if r["kind"] == "run" and str(r.get("status", "ok")).startswith("failed")]
        if failed:
            summary += ["", f"{len(failed)} run(s) failed; see the status column."]
        spread = [r for r in rows if r["kind"] == "aggregate"]
        if spread:
            ok = sum(1 for r in spread if str(r.get("spread_ok")) == "True")
            summary += ["", f"Cells with min/max within 5% of the mean: {ok}/{len(spread)}"]
    for w in warnings:
        summary += ["", f"> warning: {w}"]
    files["summary"] = out_dir / "summary.md"
    files["summary"].write_text("\n".join(summary) + "\n")
    return {"kind": kind, "files": files, "warnings": warnings}


__all__ = ["render_report", "read_csv", "SchemaError", "CSV_COLUMNS"]
