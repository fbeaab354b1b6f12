import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SimWorker, descriptor
from taskpreempt.coordinator import Coordinator, CoordinatorConfig
from taskpreempt.harness.metrics import RunMetrics, aggregate, within_spread
from taskpreempt.scheduler import ExperimentSpec, TriggerAction, TriggerRule, run_schedule


def outcome(action, r=0.5, ticks=20):
    coord = Coordinator(CoordinatorConfig(heartbeat_ms=50))
    sim = SimWorker(coord, ticks=ticks, beat_s=0.002).start()
    try:
        return run_schedule(coord, ExperimentSpec(descriptor("t_l", input_bytes=64 * 1000),
                                                  TriggerRule(r, action, descriptor("t_h")), timeout_s=20))
    finally:
        sim.stop()


def test_from_outcome_suspend():
    out = outcome(TriggerAction.SUSPEND_RESUME)
    m = RunMetrics.from_outcome(out, "suspend", 0)
    assert m.primitive == "suspend_resume"
    assert m.tuples_total_low == 1000 and m.attempts_low == 1
    assert 0 < m.sojourn_high_ms <= m.makespan_ms
    assert m.sojourn_high_ms == pytest.approx(out.high.completion_time - out.high_arrival_time)
    # active duration excludes the suspended interval
    span = out.low.completion_time - out.low.launch_times[-1]
    assert m.duration_low_ms < span


def test_from_outcome_kill_counts_wasted_work():
    out = outcome(TriggerAction.KILL_RESTART, r=0.5)
    m = RunMetrics.from_outcome(out, "kill", 0)
    assert m.attempts_low == 2
    wasted = out.low.attempts[0]["tuples_processed"]
    assert wasted >= 500
    assert m.tuples_total_low == 1000 + wasted


def test_sojourn_exceeding_makespan_rejected():
    with pytest.raises(ValueError):
        RunMetrics("wait", 0.5, 0, 10.0, 5.0, 0, 0, 0, 1, None, 0, 1.0, 1.0, 0.5, False)


def run(sojourn, makespan, **kw):
    base = dict(primitive="wait", r=0.5, run_index=0, sojourn_high_ms=sojourn, makespan_ms=makespan,
                swapped_bytes_low=0, tuples_total_low=100, input_tuples_low=100, attempts_low=1,
                summary_tuples_low=100, records_while_suspended_low=0, duration_low_ms=1.0,
                duration_high_ms=1.0, trigger_progress=0.5, memory_sampled=True)
    base.update(kw)
    return RunMetrics(**base)


def test_aggregate():
    agg = aggregate([run(100, 200), run(102, 202), run(98, 198)])
    assert agg.n == 3 and agg.mean["sojourn_high_ms"] == pytest.approx(100)
    assert agg.min["makespan_ms"] == 198 and agg.max["makespan_ms"] == 202
    assert agg.spread_ok
    assert not aggregate([run(100, 200), run(120, 200)]).spread_ok
    assert aggregate([run(1, 2), run(1, 2, status="failed: x")]).n == 1
    with pytest.raises(ValueError):
        aggregate([run(1, 2, status="failed: x")])


def test_spread_with_zero_swap():
    assert within_spread([0, 0, 0])


@given(st.lists(st.floats(1, 1e6), min_size=1, max_size=20))
def test_within_spread_matches_definition(values):
    mean = sum(values) / len(values)
    expected = max(values) <= 1.05 * mean and min(values) >= 0.95 * mean
    assert within_spread(values) == expected or math.isclose(max(values), 1.05 * mean) \
        or math.isclose(min(values), 0.95 * mean)
