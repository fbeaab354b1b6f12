import sys
import threading
import time
from pathlib import Path

import pytest

from taskpreempt.coordinator import Coordinator, CoordinatorConfig
from taskpreempt.protocol import (
    Action,
    HeartbeatMessage,
    RegisterMessage,
    TaskLaunchDescriptor,
    TaskReport,
    TaskState,
)
from taskpreempt.synthetic_task import generate_input


class SimWorker:
    """In-process stand-in for a worker: each running task advances one tick per beat."""

    def __init__(self, coord, worker_id="sim-0", slots=1, max_suspended=1, ticks=20, beat_s=0.001):
        self.coord = coord
        self.worker_id = worker_id
        self.slots = slots
        self.ticks = ticks
        self.beat_s = beat_s
        self.tasks = {}
        self.seq = 0
        self.sent = []  # every directive received, in order
        coord.register_worker(RegisterMessage(worker_id, "sim", slots, max_suspended))
        self._stop = threading.Event()
        self._thread = None

    def beat(self):
        reports = []
        for tid, t in list(self.tasks.items()):
            if t["state"] is TaskState.RUNNING:
                t["done"] += 1
                if t["done"] >= self.ticks:
                    t["state"] = TaskState.SUCCEEDED
            summary = t["tuples"] if t["state"] is TaskState.SUCCEEDED else None
            reports.append(TaskReport(tid, t["state"], t["done"] / self.ticks, summary_tuples=summary))
        running = sum(1 for t in self.tasks.values() if t["state"] is TaskState.RUNNING)
        self.seq += 1
        reply = self.coord.handle_heartbeat(
            HeartbeatMessage(self.worker_id, self.seq, tuple(reports), self.slots - running, time.monotonic() * 1000))
        for r in reports:
            if r.observed_state.terminal:
                self.tasks.pop(r.task_id, None)
        for d in reply.directives:
            self.sent.append(d)
            if d.action is Action.LAUNCH:
                self.tasks[d.task_id] = {"state": TaskState.RUNNING, "done": 0, "tuples": d.payload.input_tuples}
                continue
            t = self.tasks.get(d.task_id)
            if t is None or t["state"].terminal:
                continue
            if d.action is Action.SUSPEND and t["state"] is TaskState.RUNNING:
                t["state"] = TaskState.SUSPENDED
            elif d.action is Action.RESUME and t["state"] is TaskState.SUSPENDED:
                t["state"] = TaskState.RUNNING
            elif d.action is Action.KILL:
                t["state"] = TaskState.KILLED
        return reply

    def _loop(self):
        while not self._stop.is_set():
            self.beat()
            time.sleep(self.beat_s)

    def start(self):
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)


def descriptor(task_id="", input_bytes=64 * 1024, tuple_bytes=64, **kw):
    return TaskLaunchDescriptor(task_id=task_id, executable=sys.executable, args=(), input_path="/dev/null",
                                input_bytes=input_bytes, tuple_bytes=tuple_bytes, **kw)


@pytest.fixture
def coord(tmp_path):
    c = Coordinator(CoordinatorConfig(heartbeat_ms=50, event_log=str(tmp_path / "events.jsonl")))
    yield c
    c.close()


@pytest.fixture
def sim(coord):
    w = SimWorker(coord)
    yield w
    w.stop()


@pytest.fixture(scope="session")
def small_input(tmp_path_factory):
    """2000 tuples of 64 bytes."""
    path = tmp_path_factory.mktemp("inputs") / "small.dat"
    generate_input(path, 2000 * 64, 64, seed=3)
    return path


def task_descriptor(task_id, input_path: Path, tuple_bytes=64, progress_interval=100, work_factor=1,
                    ballast_bytes=0, extra=()):
    args = ("-m", "taskpreempt.synthetic_task", "--work-factor", str(work_factor), *extra)
    return TaskLaunchDescriptor(
        task_id=task_id, executable=sys.executable, args=args, input_path=str(input_path),
        input_bytes=input_path.stat().st_size, ballast_bytes=ballast_bytes,
        progress_interval=progress_interval, tuple_bytes=tuple_bytes,
    )


def wait_until(pred, timeout=10.0, poll=0.005):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(poll)
    return False


# -- acceptance criteria reporting ---------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title}" + (f" | {detail}" if detail else ""))
