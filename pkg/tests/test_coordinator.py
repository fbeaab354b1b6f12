import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SimWorker, descriptor, wait_until
from taskpreempt.coordinator import (
    Coordinator,
    CoordinatorClient,
    CoordinatorConfig,
    CoordinatorError,
    CoordinatorServer,
    DuplicateTask,
    Priority,
    Primitive,
    SwapBudgetExceeded,
    UnknownTask,
    UnknownWorker,
    WorkerLost,
)
from taskpreempt.eventlog import read_log
from taskpreempt.protocol import (
    Action,
    HeartbeatMessage,
    IllegalTransition,
    RegisterMessage,
    TaskReport,
    TaskState as S,
)


def beat(coord, worker_id, seq, reports=(), free=1):
    return coord.handle_heartbeat(HeartbeatMessage(worker_id, seq, tuple(reports), free, 0.0))


def running_task(coord, sim, task_id="t_l"):
    coord.submit_task(descriptor(task_id))
    sim.beat()  # LAUNCH goes out
    sim.beat()  # worker reports RUNNING
    assert coord.tasks[task_id].state is S.RUNNING


def test_submit_assigns_ids_and_rejects_duplicates(coord):
    a = coord.submit_task(descriptor())
    b = coord.submit_task(descriptor())
    assert a != b and a.startswith("task-")
    coord.submit_task(descriptor("x"))
    with pytest.raises(DuplicateTask):
        coord.submit_task(descriptor("x"))
    with pytest.raises(UnknownWorker):
        coord.submit_task(descriptor("y"), target_worker="nobody")


def test_unknown_worker_heartbeat(coord):
    with pytest.raises(UnknownWorker):
        beat(coord, "ghost", 1)


def test_unknown_task(coord):
    with pytest.raises(UnknownTask):
        coord.request_preemption("missing")


def test_launch_placement_high_first(coord, sim):
    coord.submit_task(descriptor("low"), Priority.LOW)
    coord.submit_task(descriptor("high"), Priority.HIGH)
    reply = sim.beat()
    assert [(d.task_id, d.action) for d in reply.directives] == [("high", Action.LAUNCH)]
    assert coord.tasks["low"].state is S.PENDING


def test_suspend_issues_exactly_one_directive(coord, sim):
    running_task(coord, sim)
    assert coord.request_preemption("t_l", Primitive.SUSPEND) is S.MUST_SUSPEND
    reply = sim.beat()
    assert [(d.task_id, d.action) for d in reply.directives] == [("t_l", Action.SUSPEND)]
    assert coord.tasks["t_l"].state is S.SUSPENDING_SENT
    # further beats carry no repeat
    for _ in range(3):
        assert all(d.task_id != "t_l" for d in sim.beat().directives)
    assert coord.tasks["t_l"].state is S.SUSPENDED


def test_completion_beats_suspend(coord):
    coord.register_worker(RegisterMessage("w1", "x", 1, 1))
    coord.submit_task(descriptor("t_l"))
    beat(coord, "w1", 1)
    beat(coord, "w1", 2, [TaskReport("t_l", S.RUNNING, 0.5)])
    coord.request_preemption("t_l")
    assert coord.tasks["t_l"].state is S.MUST_SUSPEND
    reply = beat(coord, "w1", 3, [TaskReport("t_l", S.SUCCEEDED, 1.0, summary_tuples=10)])
    assert coord.tasks["t_l"].state is S.SUCCEEDED
    assert not any(d.task_id == "t_l" for d in reply.directives)
    assert any(e["event"] == "directive_dropped" for e in coord.events.entries)


def test_completion_after_suspend_sent(coord):
    coord.register_worker(RegisterMessage("w1", "x", 1, 1))
    coord.submit_task(descriptor("t_l"))
    beat(coord, "w1", 1)
    beat(coord, "w1", 2, [TaskReport("t_l", S.RUNNING, 0.5)])
    coord.request_preemption("t_l")
    beat(coord, "w1", 3, [TaskReport("t_l", S.RUNNING, 0.6)])
    assert coord.tasks["t_l"].state is S.SUSPENDING_SENT
    beat(coord, "w1", 4, [TaskReport("t_l", S.SUCCEEDED, 1.0)])
    assert coord.tasks["t_l"].state is S.SUCCEEDED
    with pytest.raises(IllegalTransition):
        coord.request_resume("t_l")


def test_stale_heartbeat_ignored(coord):
    coord.register_worker(RegisterMessage("w1", "x", 1, 1))
    coord.submit_task(descriptor("t"))
    assert beat(coord, "w1", 5).directives
    assert beat(coord, "w1", 5).directives == ()
    assert beat(coord, "w1", 4, [TaskReport("t", S.FAILED, 0.0)]).directives == ()
    assert coord.tasks["t"].state is S.LAUNCHING


def test_kill_then_reschedule(coord, sim):
    running_task(coord, sim)
    sim.beat()
    coord.request_preemption("t_l", Primitive.KILL)
    sim.beat()  # KILL sent
    sim.beat()  # KILLED reported
    rec = coord.tasks["t_l"]
    assert rec.state is S.KILLED
    states = [e["new_state"] for e in coord.events.entries if e["task_id"] == "t_l"]
    assert states[-2:] == ["CLEANUP", "KILLED"]
    assert coord.reschedule("t_l") == 2
    assert rec.state is S.PENDING and rec.progress_fraction == 0.0
    assert rec.attempts[0]["final_state"] == "KILLED"
    while coord.tasks["t_l"].state is not S.SUCCEEDED:
        sim.beat()
    assert coord.tasks["t_l"].attempt_count == 2


def test_reschedule_requires_terminal(coord, sim):
    running_task(coord, sim)
    with pytest.raises(IllegalTransition):
        coord.reschedule("t_l")


def test_swap_budget_count(coord):
    coord.register_worker(RegisterMessage("w1", "x", 2, 1))
    coord.submit_task(descriptor("a"))
    coord.submit_task(descriptor("b"))
    beat(coord, "w1", 1, free=2)
    beat(coord, "w1", 2, [TaskReport("a", S.RUNNING, 0.1), TaskReport("b", S.RUNNING, 0.1)], free=0)
    coord.request_preemption("a")
    with pytest.raises(SwapBudgetExceeded):
        coord.request_preemption("b")
    assert coord.tasks["b"].state is S.RUNNING
    # kill is not a suspension and is unaffected
    coord.request_preemption("b", Primitive.KILL)


def test_swap_budget_bytes(tmp_path):
    coord = Coordinator(CoordinatorConfig(task_memory_cap_bytes=100, memory_budget_bytes=150))
    sim = SimWorker(coord, max_suspended=4)
    running_task(coord, sim)
    with pytest.raises(SwapBudgetExceeded):
        coord.request_preemption("t_l")
    assert coord.tasks["t_l"].state is S.RUNNING


def test_resume_on_dead_worker_restarts(coord, sim):
    running_task(coord, sim)
    coord.request_preemption("t_l")
    sim.beat()
    sim.beat()
    assert coord.tasks["t_l"].state is S.SUSPENDED
    coord.workers[sim.worker_id].last_heartbeat -= 11 * coord.config.heartbeat_ms
    with pytest.raises(WorkerLost) as info:
        coord.request_resume("t_l")
    assert info.value.attempt == 2
    rec = coord.tasks["t_l"]
    assert rec.state is S.PENDING and rec.attempt_count == 2
    assert rec.attempts[0]["final_state"] == "FAILED"


def test_resume_on_live_worker(coord, sim):
    running_task(coord, sim)
    coord.request_preemption("t_l")
    sim.beat()
    sim.beat()
    assert coord.request_resume("t_l") is S.MUST_RESUME
    reply = sim.beat()
    assert [(d.task_id, d.action) for d in reply.directives] == [("t_l", Action.RESUME)]
    sim.beat()
    rec = coord.tasks["t_l"]
    assert rec.state is S.RUNNING
    assert len(rec.suspend_times) == 1 and len(rec.resume_times) == 1


def test_event_log_file(tmp_path, coord, sim):
    running_task(coord, sim)
    coord.close()
    entries = read_log(tmp_path / "events.jsonl")
    assert [e["new_state"] for e in entries] == ["PENDING", "LAUNCHING", "LAUNCHING", "RUNNING"]
    assert all("timestamp" in e for e in entries)


# -- property tests ----------------------------------------------------------

ops = st.lists(
    st.tuples(st.sampled_from(["submit_low", "submit_high", "suspend", "kill", "resume", "reschedule", "beat"]),
              st.integers(0, 5)),
    max_size=60,
)


@settings(max_examples=60, deadline=None)
@given(ops, st.integers(1, 3), st.integers(1, 2))
def test_random_ops_preserve_invariants(seq, slots, max_suspended):
    coord = Coordinator(CoordinatorConfig(heartbeat_ms=50))
    sim = SimWorker(coord, slots=slots, max_suspended=max_suspended, ticks=4)
    sent_counts = {}
    for op, k in seq:
        ids = sorted(coord.tasks)
        tid = ids[k % len(ids)] if ids else None
        try:
            if op == "submit_low":
                coord.submit_task(descriptor(), Priority.LOW)
            elif op == "submit_high":
                coord.submit_task(descriptor(), Priority.HIGH)
            elif op == "suspend" and tid:
                coord.request_preemption(tid, Primitive.SUSPEND)
            elif op == "kill" and tid:
                coord.request_preemption(tid, Primitive.KILL)
            elif op == "resume" and tid:
                coord.request_resume(tid)
            elif op == "reschedule" and tid:
                coord.reschedule(tid)
            elif op == "beat":
                before = len(sim.sent)
                sim.beat()
                for d in sim.sent[before:]:
                    key = (d.task_id, d.action, coord.tasks[d.task_id].attempt_count)
                    sent_counts[key] = sent_counts.get(key, 0) + 1
        except (IllegalTransition, SwapBudgetExceeded):
            pass
        worker = coord.workers[sim.worker_id]
        assert worker.slots_running <= worker.slots_total
        assert worker.slots_suspended <= max_suspended
        assert sum(1 for t in sim.tasks.values() if t["state"] is S.RUNNING) <= slots
    # a LAUNCH goes out at most once per attempt, SUSPEND at most once per suspension request
    assert all(n == 1 for (t, a, _), n in sent_counts.items() if a is Action.LAUNCH)


def test_random_reports_never_crash_handler():
    rng = random.Random(11)
    coord = Coordinator()
    coord.register_worker(RegisterMessage("w", "x", 2, 2))
    for i in range(5):
        coord.submit_task(descriptor(f"t{i}"))
    states = [S.RUNNING, S.SUSPENDED, S.SUCCEEDED, S.FAILED, S.KILLED]
    for seq in range(1, 400):
        reports = [TaskReport(f"t{rng.randrange(6)}", rng.choice(states), rng.random()) for _ in range(rng.randrange(3))]
        reports = list({r.task_id: r for r in reports}.values())
        beat(coord, "w", seq, reports, free=rng.randrange(3))
        tid = f"t{rng.randrange(5)}"
        for call in (coord.request_preemption, coord.request_resume, coord.reschedule):
            try:
                call(tid)
            except (IllegalTransition, SwapBudgetExceeded):
                pass
    for rec in coord.tasks.values():
        assert isinstance(rec.state, S)


# -- TCP front end -----------------------------------------------------------

def test_control_api_over_tcp(coord):
    server = CoordinatorServer(coord).start()
    try:
        sim = SimWorker(coord, ticks=10_000).start()
        client = CoordinatorClient(server.address)
        tid = client.submit(descriptor("tcp-task"))
        assert tid == "tcp-task"
        assert wait_until(lambda: coord.tasks[tid].state is S.RUNNING)
        assert client.preempt(tid, "SUSPEND") == "MUST_SUSPEND"
        assert wait_until(lambda: coord.tasks[tid].state is S.SUSPENDED)
        assert client.resume(tid) == "MUST_RESUME"
        assert wait_until(lambda: coord.tasks[tid].state is S.RUNNING)
        snap = client.snapshot()
        assert snap["tasks"][0]["task_id"] == tid
        with pytest.raises(CoordinatorError, match="UnknownTask"):
            client.preempt("nope")
        with pytest.raises(CoordinatorError, match="DuplicateTask"):
            client.submit(descriptor("tcp-task"))
        client.close()
        sim.stop()
    finally:
        server.stop()
