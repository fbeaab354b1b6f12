import os
import signal
import socket
import statistics
import sys
import threading
import time

import pytest

from conftest import task_descriptor, wait_until
from taskpreempt.protocol import (
    Action,
    CommandMessage,
    ControlReply,
    Directive,
    HeartbeatMessage,
    IllegalTransition,
    RegisterMessage,
    TaskLaunchDescriptor,
    TaskState as S,
    recv_message,
    send_message,
)
from taskpreempt.synthetic_task import generate_input
from taskpreempt.worker import NoFreeSlot, ProcessGone, SpawnFailure, Worker, process_state

SLOW = 15000  # work factor giving roughly 5 s over the small input


@pytest.fixture
def worker(tmp_path):
    w = Worker(tmp_path / "work", slots=1, max_suspended=1, worker_id="w-test")
    yield w
    w.stop()


def test_launch_and_succeed(worker, small_input):
    task = worker.launch(task_descriptor("t1", small_input))
    assert wait_until(lambda: task.terminal, timeout=30)
    assert task.observed_state is S.SUCCEEDED
    assert task.summary_tuples == 2000 and task.checksum_ok
    assert task.progress_records == 20
    assert task.progress_fraction == 1.0


def test_suspend_stops_progress_and_resume_continues(worker, small_input):
    task = worker.launch(task_descriptor("t1", small_input, work_factor=SLOW, progress_interval=20))
    assert wait_until(lambda: task.progress_records >= 3, timeout=20)
    worker.suspend(task)
    assert task.observed_state is S.SUSPENDED
    assert process_state(task.process_id) == "T"
    frozen = task.progress_fraction
    time.sleep(0.5)
    with worker._lock:
        worker._drain(task)
    assert task.progress_fraction == frozen
    assert task.records_while_suspended == 0
    worker.resume(task)
    assert task.observed_state is S.RUNNING
    assert wait_until(lambda: task.progress_fraction > frozen, timeout=10)
    assert wait_until(lambda: task.resumed_markers == 1, timeout=5)
    worker.kill(task)


def test_kill_running_and_suspended(worker, small_input):
    task = worker.launch(task_descriptor("t1", small_input, work_factor=SLOW, progress_interval=20))
    assert wait_until(lambda: task.progress_records >= 1, timeout=20)
    assert any(task.temp_output_dir.iterdir())
    worker.suspend(task)
    worker.kill(task)
    assert task.observed_state is S.KILLED
    assert task.process.poll() is not None
    assert not task.temp_output_dir.exists()
    worker.kill(task)  # idempotent on a terminal task


def test_memory_sampling_tracks_ballast(worker, small_input):
    ballast = 64 << 20
    task = worker.launch(task_descriptor("t1", small_input, work_factor=SLOW, ballast_bytes=ballast))
    assert wait_until(lambda: task.progress_records >= 1, timeout=30)
    rss, swap = worker.sample_memory(task)
    assert rss >= 0.95 * ballast
    assert swap >= 0
    worker.kill(task)


def test_no_free_slot(worker, small_input):
    task = worker.launch(task_descriptor("t1", small_input, work_factor=SLOW))
    with pytest.raises(NoFreeSlot):
        worker.launch(task_descriptor("t2", small_input))
    worker.kill(task)


def test_spawn_failure(worker, small_input):
    bad = TaskLaunchDescriptor("t1", "/nonexistent/binary", (), str(small_input), 64 * 2000, tuple_bytes=64)
    with pytest.raises(SpawnFailure):
        worker.launch(bad)
    assert worker.free_slots() == 1


def test_launch_directive_failure_becomes_failed_report(worker, small_input):
    bad = TaskLaunchDescriptor("t1", "/nonexistent/binary", (), str(small_input), 64 * 2000, tuple_bytes=64)
    worker.apply(CommandMessage((Directive("t1", Action.LAUNCH, bad),)))
    hb = worker.build_heartbeat()
    assert [(r.task_id, r.observed_state) for r in hb.task_reports] == [("t1", S.FAILED)]


def test_process_gone(worker, small_input):
    task = worker.launch(task_descriptor("t1", small_input, work_factor=SLOW))
    assert wait_until(lambda: task.progress_records >= 1, timeout=20)
    os.killpg(task.process_id, signal.SIGKILL)
    assert wait_until(lambda: task.terminal, timeout=10)
    assert task.observed_state is S.FAILED
    with pytest.raises(IllegalTransition):
        worker.suspend(task)


def test_suspend_race_with_exit(worker, small_input, monkeypatch):
    task = worker.launch(task_descriptor("t1", small_input, work_factor=SLOW))
    assert wait_until(lambda: task.progress_records >= 1, timeout=20)
    task.process.kill()
    task.process.wait()
    with pytest.raises(ProcessGone):
        worker.suspend(task)


def test_bad_input_fails(worker, tmp_path):
    path = tmp_path / "bad.dat"
    path.write_bytes(b"z" * 64 * 10)
    task = worker.launch(task_descriptor("t1", path))
    assert wait_until(lambda: task.terminal, timeout=20)
    assert task.observed_state is S.FAILED and task.exit_code == 2


def test_terminal_reported_once(worker, small_input):
    task = worker.launch(task_descriptor("t1", small_input))
    assert wait_until(lambda: task.terminal, timeout=30)
    hb = worker.build_heartbeat()
    assert hb.task_reports[0].observed_state is S.SUCCEEDED
    assert hb.task_reports[0].summary_tuples == 2000
    worker.acknowledge(hb)
    assert worker.build_heartbeat().task_reports == ()


# -- heartbeat timing against a stub coordinator ------------------------------

class StubCoordinator:
    def __init__(self, script=None):
        self.sock = socket.socket()
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen()
        self.address = "127.0.0.1:%d" % self.sock.getsockname()[1]
        self.beats = []  # (arrival time, message)
        self.script = dict(script or {})  # heartbeat index -> CommandMessage
        self.registered = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        try:
            conn, _ = self.sock.accept()
        except OSError:
            return
        with conn:
            while True:
                try:
                    msg = recv_message(conn)
                except (OSError, EOFError, Exception):
                    return
                if isinstance(msg, RegisterMessage):
                    self.registered.set()
                    send_message(conn, ControlReply(True))
                elif isinstance(msg, HeartbeatMessage):
                    self.beats.append((time.monotonic(), msg))
                    send_message(conn, self.script.pop(len(self.beats), CommandMessage()))

    def close(self):
        self.sock.close()


def test_heartbeat_cadence(tmp_path):
    stub = StubCoordinator()
    w = Worker(tmp_path / "w", heartbeat_ms=50, coordinator=stub.address, worker_id="w-cad")
    w.start()
    try:
        assert wait_until(lambda: len(stub.beats) >= 21, timeout=10)
        times = [t for t, _ in stub.beats[:21]]
        gaps = [b - a for a, b in zip(times, times[1:])]
        assert 0.045 <= statistics.median(gaps) <= 0.08
        seqs = [m.sequence_no for _, m in stub.beats]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
    finally:
        w.stop()
        stub.close()


def test_heartbeat_wakes_on_exit(tmp_path, small_input):
    d = task_descriptor("t1", small_input)
    stub = StubCoordinator({1: CommandMessage((Directive("t1", Action.LAUNCH, d),))})
    w = Worker(tmp_path / "w", heartbeat_ms=2000, coordinator=stub.address, worker_id="w-wake")
    w.start()
    try:
        assert wait_until(lambda: any(r.observed_state is S.SUCCEEDED for _, m in stub.beats for r in m.task_reports),
                          timeout=30)
        done = next(t for t, m in stub.beats if any(r.observed_state is S.SUCCEEDED for r in m.task_reports))
        exit_time = w.events.entries[-1]["timestamp"] / 1000
        # reported well before the next 2 s tick
        assert len(stub.beats) <= 3
        assert 0 <= done - exit_time < 0.5
    finally:
        w.stop()
        stub.close()


def test_heartbeat_reconnects_after_coordinator_down(tmp_path):
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()  # nothing listening on this port yet
    w = Worker(tmp_path / "w", heartbeat_ms=20, coordinator=f"127.0.0.1:{port}", worker_id="w-re")
    w.start()
    try:
        time.sleep(0.3)
        assert w._sock is None
        stub = StubCoordinator.__new__(StubCoordinator)
        stub.sock = socket.socket()
        stub.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        stub.sock.bind(("127.0.0.1", port))
        stub.sock.listen()
        stub.address, stub.beats, stub.script = f"127.0.0.1:{port}", [], {}
        stub.registered = threading.Event()
        threading.Thread(target=stub._serve, daemon=True).start()
        assert stub.registered.wait(5)
        assert wait_until(lambda: len(stub.beats) >= 2, timeout=5)
    finally:
        w.stop()
        stub.close()


def test_worker_cli_help():
    import subprocess
    proc = subprocess.run([sys.executable, "-m", "taskpreempt.worker", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--coordinator" in proc.stdout


def test_descriptor_large_input_generation(tmp_path):
    path = generate_input(tmp_path / "in", 10 * 64, 64, 9)
    d = task_descriptor("x", path)
    assert d.input_tuples == 10
