"""Per-run measurements and their aggregation across repetitions."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, fields
from typing import Optional, Sequence

from ..scheduler import ScheduleOutcome
from .oracle import normalize_primitive

SPREAD_TOLERANCE = 0.05

# fields aggregated as mean/min/max, and checked for the 5% spread
AGGREGATED = (
    "sojourn_high_ms",
    "makespan_ms",
    "swapped_bytes_low",
    "tuples_total_low",
    "duration_low_ms",
    "duration_high_ms",
)
SPREAD_CHECKED = ("sojourn_high_ms", "makespan_ms", "swapped_bytes_low", "tuples_total_low")


@dataclass
class RunMetrics:
    primitive: str
    r: float
    run_index: int
    sojourn_high_ms: float
    makespan_ms: float
    swapped_bytes_low: int
    tuples_total_low: int
    input_tuples_low: int
    attempts_low: int
    summary_tuples_low: Optional[int]
    records_while_suspended_low: int
    duration_low_ms: float
    duration_high_ms: float
    trigger_progress: float
    memory_sampled: bool
    ballast_low: int = 0
    ballast_high: int = 0
    progress_granule: int = 0
    status: str = "ok"

    def __post_init__(self):
        if self.sojourn_high_ms > self.makespan_ms:
            raise ValueError(f"sojourn {self.sojourn_high_ms} exceeds makespan {self.makespan_ms}")

    @classmethod
    def from_outcome(cls, outcome: ScheduleOutcome, primitive: str, run_index: int) -> "RunMetrics":
        low, high = outcome.low, outcome.high
        primitive = normalize_primitive(primitive)
        # wasted work of earlier attempts comes from their last progress report
        tuples = sum(a["tuples_processed"] for a in low.attempts)
        tuples += low.summary_tuples if low.summary_tuples is not None else 0
        swapped = max([low.swapped_bytes_peak] + [a["swapped_bytes_peak"] for a in low.attempts])
        stopped = sum(b - a for a, b in zip(low.suspend_times, low.resume_times))
        return cls(
            primitive=primitive,
            r=outcome.threshold_r,
            run_index=run_index,
            sojourn_high_ms=high.completion_time - outcome.high_arrival_time,
            makespan_ms=outcome.done_time - outcome.low_submit_time,
            swapped_bytes_low=swapped,
            tuples_total_low=tuples,
            input_tuples_low=low.descriptor.input_tuples,
            attempts_low=low.attempt_count,
            summary_tuples_low=low.summary_tuples,
            records_while_suspended_low=low.records_while_suspended,
            duration_low_ms=low.completion_time - low.launch_times[-1] - stopped,
            duration_high_ms=high.completion_time - high.launch_times[-1],
            trigger_progress=outcome.trigger_progress if outcome.trigger_progress is not None else float("nan"),
            memory_sampled=low.memory_sampled,
            ballast_low=low.descriptor.ballast_bytes,
            ballast_high=high.descriptor.ballast_bytes,
            progress_granule=low.descriptor.progress_interval,
        )

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AggregateMetrics:
    primitive: str
    r: float
    n: int
    mean: dict
    min: dict
    max: dict
    spread_ok: bool

    def as_row(self) -> dict:
        row = {"primitive": self.primitive, "r": self.r, "n": self.n, "spread_ok": self.spread_ok}
        for name in AGGREGATED:
            row[name] = self.mean[name]
            row[f"{name}_min"] = self.min[name]
            row[f"{name}_max"] = self.max[name]
        return row


def within_spread(values: Sequence[float], tolerance: float = SPREAD_TOLERANCE) -> bool:
    mean = statistics.fmean(values)
    return max(values) <= (1 + tolerance) * mean and min(values) >= (1 - tolerance) * mean


def aggregate(runs: Sequence[RunMetrics]) -> AggregateMetrics:
    ok = [r for r in runs if r.status == "ok"]
    if not ok:
        raise ValueError("no successful runs to aggregate")
    mean, lo, hi = {}, {}, {}
    for name in AGGREGATED:
        values = [getattr(r, name) for r in ok]
        mean[name] = statistics.fmean(values)
        lo[name] = min(values)
        hi[name] = max(values)
    spread_ok = all(within_spread([getattr(r, name) for r in ok]) for name in SPREAD_CHECKED)
    return AggregateMetrics(ok[0].primitive, ok[0].r, len(ok), mean, lo, hi, spread_ok)
