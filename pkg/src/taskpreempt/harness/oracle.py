"""Closed-form two-task timelines, used to check measured runs independently."""
from __future__ import annotations

from dataclasses import dataclass

_ALIASES = {
    "wait": "wait",
    "kill": "kill",
    "kill_restart": "kill",
    "suspend": "suspend_resume",
    "suspend_resume": "suspend_resume",
}


def normalize_primitive(primitive) -> str:
    key = str(getattr(primitive, "value", primitive)).lower()
    try:
        return _ALIASES[key]
    except KeyError:
        raise ValueError(f"unknown primitive {primitive!r}") from None


@dataclass(frozen=True)
class OverheadModel:
    cleanup: float = 0.0       # kill: removing the killed attempt's temporary outputs
    page_penalty: float = 0.0  # suspend: paging the suspended task out and back in


def timeline_oracle(primitive, r: float, duration_low: float, duration_high: float,
                    overhead: OverheadModel = OverheadModel()) -> tuple[float, float]:
    """Expected (sojourn of the high task, makespan) in the units of the durations.

    The low task starts at 0; the high task arrives when the low one has done
    a fraction ``r`` of its work.
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"r={r} must lie strictly between 0 and 1")
    if duration_low <= 0 or duration_high <= 0:
        raise ValueError("durations must be positive")
    p = normalize_primitive(primitive)
    if p == "wait":
        return (1.0 - r) * duration_low + duration_high, duration_low + duration_high
    if p == "kill":
        sojourn = duration_high + overhead.cleanup
        return sojourn, r * duration_low + duration_high + duration_low + overhead.cleanup
    return duration_high + overhead.page_penalty, duration_low + duration_high + overhead.page_penalty
