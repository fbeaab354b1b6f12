"""Per-machine agent: runs task processes and preempts them with job-control signals.

Suspend is SIGTSTP to the task's process group, resume is SIGCONT, kill is
SIGKILL followed by removal of the task's temporary output directory. The
worker only reports SUSPENDED once the OS shows the process stopped.
"""
from __future__ import annotations

import argparse
import logging
import os
import select
import shutil
import signal
import socket
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .eventlog import EventLog, now_ms
from .protocol import (
    Action,
    CommandMessage,
    ControlReply,
    HeartbeatMessage,
    IllegalTransition,
    MalformedMessage,
    RegisterMessage,
    TaskLaunchDescriptor,
    TaskReport,
    TaskState,
    TransitionEvent,
    parse_address,
    recv_message,
    send_message,
)

log = logging.getLogger(__name__)

STATE_POLL_S = 0.010
STATE_TIMEOUT_S = 1.0
DEFAULT_HEARTBEAT_MS = 300


class WorkerError(Exception):
    pass


class NoFreeSlot(WorkerError):
    pass


class SpawnFailure(WorkerError):
    pass


class ProcessGone(WorkerError):
    pass


class Unsupported(WorkerError):
    pass


# ---------------------------------------------------------------------------
# OS inspection


def process_state(pid: int) -> Optional[str]:
    """Single-letter scheduler state from /proc (R, S, T, Z, ...); None if gone."""
    try:
        with open(f"/proc/{pid}/stat") as fh:
            stat = fh.read()
    except OSError:
        return None
    # comm may contain spaces and parens; the state follows the last ')'
    return stat[stat.rindex(")") + 2]


def sample_memory_pid(pid: int) -> tuple[int, int]:
    """(resident_bytes, swapped_bytes) from /proc/<pid>/status."""
    try:
        with open(f"/proc/{pid}/status") as fh:
            text = fh.read()
    except OSError:
        raise Unsupported(f"no status accounting for pid {pid}") from None
    values = {}
    for line in text.splitlines():
        key, _, rest = line.partition(":")
        if key in ("VmRSS", "VmSwap"):
            values[key] = int(rest.split()[0]) * 1024
    if "VmSwap" not in values or "VmRSS" not in values:
        # kernel threads and zombies have no memory lines
        raise Unsupported(f"pid {pid} exposes no per-process swap counter")
    return values["VmRSS"], values["VmSwap"]


# ---------------------------------------------------------------------------


@dataclass
class LocalTask:
    task_id: str
    descriptor: Optional[TaskLaunchDescriptor]
    process: Optional[subprocess.Popen]
    temp_output_dir: Path
    observed_state: TaskState = TaskState.RUNNING
    progress_fraction: float = 0.0
    resident_bytes: int = 0
    swapped_bytes: int = 0
    swapped_bytes_peak: int = 0
    memory_sampled: bool = False
    progress_records: int = 0
    records_while_suspended: int = 0
    resumed_markers: int = 0
    summary_tuples: Optional[int] = None
    checksum_ok: Optional[bool] = None
    exit_code: Optional[int] = None
    killed_by_worker: bool = False
    reported_terminal: bool = False
    _buf: bytearray = field(default_factory=bytearray, repr=False)
    _eof: bool = False
    _supervisor: Optional[threading.Thread] = field(default=None, repr=False)
    _exited: threading.Event = field(default_factory=threading.Event, repr=False)

    @property
    def process_id(self) -> Optional[int]:
        return self.process.pid if self.process else None

    @property
    def terminal(self) -> bool:
        return self.observed_state.terminal

    def report(self) -> TaskReport:
        return TaskReport(
            task_id=self.task_id,
            observed_state=self.observed_state,
            progress_fraction=self.progress_fraction,
            resident_bytes=self.resident_bytes,
            swapped_bytes=self.swapped_bytes_peak,
            memory_sampled=self.memory_sampled,
            summary_tuples=self.summary_tuples,
            records_while_suspended=self.records_while_suspended,
        )


class Worker:
    def __init__(
        self,
        workdir,
        slots: int = 1,
        max_suspended: int = 1,
        heartbeat_ms: float = DEFAULT_HEARTBEAT_MS,
        coordinator: Optional[str] = None,
        worker_id: Optional[str] = None,
        event_log: Optional[str] = None,
    ):
        self.worker_id = worker_id or f"worker-{uuid.uuid4().hex[:8]}"
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.slots = slots
        self.max_suspended = max_suspended
        self.heartbeat_ms = heartbeat_ms
        self.coordinator = coordinator
        self.tasks: dict[str, LocalTask] = {}
        self.events = EventLog(event_log)
        self.sequence_no = 0
        self._lock = threading.RLock()
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._sock: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None

    # -- bookkeeping --------------------------------------------------------

    def _set_state(self, task: LocalTask, new: TaskState, event) -> None:
        old = task.observed_state
        task.observed_state = new
        self.events.record(task.task_id, old, event, new, worker_id=self.worker_id)

    def running_count(self) -> int:
        with self._lock:
            return sum(1 for t in self.tasks.values() if t.observed_state is TaskState.RUNNING)

    def free_slots(self) -> int:
        return max(0, self.slots - self.running_count())

    def task_output_dir(self, task_id: str) -> Path:
        return self.workdir / task_id

    # -- progress channel ---------------------------------------------------

    def _handle_line(self, task: LocalTask, line: str) -> None:
        kind, _, rest = line.partition(" ")
        if kind == "PROGRESS":
            try:
                fraction = float(rest)
            except ValueError:
                log.warning("%s: bad progress record %r", task.task_id, line)
                return
            task.progress_records += 1
            if task.observed_state is TaskState.SUSPENDED:
                task.records_while_suspended += 1
            task.progress_fraction = max(task.progress_fraction, min(1.0, fraction))
        elif kind == "RESUMED":
            task.resumed_markers += 1
        elif kind == "SUMMARY":
            fields = dict(kv.split("=", 1) for kv in rest.split() if "=" in kv)
            task.summary_tuples = int(fields.get("tuples", 0))
            task.checksum_ok = fields.get("checksum") == "ok"
        elif line:
            log.debug("%s: %s", task.task_id, line)

    def _drain(self, task: LocalTask) -> None:
        """Consume everything currently buffered in the task's stdout pipe. Caller holds the lock."""
        if task._eof or task.process is None:
            return
        fd = task.process.stdout.fileno()
        while True:
            try:
                chunk = os.read(fd, 65536)
            except BlockingIOError:
                return
            except OSError:
                task._eof = True
                return
            if not chunk:
                task._eof = True
                return
            task._buf.extend(chunk)
            while True:
                nl = task._buf.find(b"\n")
                if nl < 0:
                    break
                line = task._buf[:nl].decode(errors="replace").strip()
                del task._buf[:nl + 1]
                self._handle_line(task, line)

    def _supervise(self, task: LocalTask) -> None:
        proc = task.process
        fd = proc.stdout.fileno()
        while True:
            try:
                select.select([fd], [], [], 0.05)
            except (OSError, ValueError):
                pass
            with self._lock:
                self._drain(task)
                if task._eof:
                    break
        rc = proc.wait()
        proc.stdout.close()
        with self._lock:
            task.exit_code = rc
            if not task.killed_by_worker and not task.terminal:
                if rc == 0 and task.checksum_ok is not False:
                    self._set_state(task, TaskState.SUCCEEDED, TransitionEvent.WORKER_REPORTED_SUCCESS)
                else:
                    self._set_state(task, TaskState.FAILED, TransitionEvent.WORKER_REPORTED_FAILURE)
        task._exited.set()
        self._wake.set()

    # -- operations ---------------------------------------------------------

    def launch(self, descriptor: TaskLaunchDescriptor) -> LocalTask:
        with self._lock:
            existing = self.tasks.get(descriptor.task_id)
            if existing is not None and not existing.terminal:
                raise SpawnFailure(f"task {descriptor.task_id} is already active on this worker")
            if self.free_slots() <= 0:
                raise NoFreeSlot(f"all {self.slots} slots busy")
            exe = descriptor.executable
            if not (os.path.isfile(exe) and os.access(exe, os.X_OK)):
                raise SpawnFailure(f"executable not found: {exe}")
            out_dir = self.task_output_dir(descriptor.task_id)
            shutil.rmtree(out_dir, ignore_errors=True)
            out_dir.mkdir(parents=True)
            argv = [
                exe,
                *descriptor.args,
                "--input", descriptor.input_path,
                "--ballast-bytes", str(descriptor.ballast_bytes),
                "--progress-interval", str(descriptor.progress_interval),
                "--tuple-bytes", str(descriptor.tuple_bytes),
                "--output-dir", str(out_dir),
            ]
            stderr = open(self.workdir / f"{descriptor.task_id}.attempt{descriptor.attempt}.stderr", "wb")
            try:
                # own process group (not session): signals reach task-spawned children,
                # and the group stays non-orphaned so job-control stops are honoured
                proc = subprocess.Popen(
                    argv, stdin=subprocess.DEVNULL, stdout=subprocess.PIPE, stderr=stderr,
                    preexec_fn=os.setpgrp, close_fds=True,
                )
            except OSError as exc:
                raise SpawnFailure(str(exc)) from exc
            finally:
                stderr.close()
            os.set_blocking(proc.stdout.fileno(), False)
            task = LocalTask(descriptor.task_id, descriptor, proc, out_dir)
            self.tasks[task.task_id] = task
            self.events.record(task.task_id, None, TransitionEvent.LAUNCH, TaskState.RUNNING,
                               worker_id=self.worker_id, pid=proc.pid)
            task._supervisor = threading.Thread(target=self._supervise, args=(task,),
                                                name=f"supervise-{task.task_id}", daemon=True)
            task._supervisor.start()
            return task

    def _await_exit(self, task: LocalTask, timeout: float = 2.0) -> None:
        task._exited.wait(timeout)

    def _wait_for_state(self, task: LocalTask, stopped: bool) -> bool:
        deadline = time.monotonic() + STATE_TIMEOUT_S
        while True:
            state = process_state(task.process.pid)
            if state is None or state == "Z" or task.process.poll() is not None:
                raise ProcessGone(task.task_id)
            if (state == "T") == stopped:
                return True
            if time.monotonic() >= deadline:
                return False
            time.sleep(STATE_POLL_S)

    def _fail_stuck(self, task: LocalTask, why: str) -> None:
        log.error("%s: %s; killing", task.task_id, why)
        with self._lock:
            task.killed_by_worker = True
            self._set_state(task, TaskState.FAILED, TransitionEvent.WORKER_REPORTED_FAILURE)
        try:
            os.killpg(task.process.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        self._await_exit(task)

    def suspend(self, task: LocalTask) -> None:
        if task.observed_state is not TaskState.RUNNING:
            raise IllegalTransition(task.observed_state, TransitionEvent.SCHEDULER_SUSPEND)
        try:
            os.killpg(task.process.pid, signal.SIGTSTP)
            confirmed = self._wait_for_state(task, stopped=True)
        except (ProcessGone, ProcessLookupError):
            self._await_exit(task)
            raise ProcessGone(task.task_id) from None
        if not confirmed:
            self._fail_stuck(task, "did not stop within timeout")
            return
        with self._lock:
            # the process is stopped, so whatever is in the pipe predates the suspension
            self._drain(task)
            self._sample(task)
            self._set_state(task, TaskState.SUSPENDED, TransitionEvent.WORKER_CONFIRMED_SUSPENDED)

    def resume(self, task: LocalTask) -> None:
        if task.observed_state is not TaskState.SUSPENDED:
            raise IllegalTransition(task.observed_state, TransitionEvent.SCHEDULER_RESUME)
        with self._lock:
            self._sample(task)
            self._set_state(task, TaskState.RUNNING, TransitionEvent.WORKER_CONFIRMED_RUNNING)
        try:
            os.killpg(task.process.pid, signal.SIGCONT)
            confirmed = self._wait_for_state(task, stopped=False)
        except (ProcessGone, ProcessLookupError):
            self._await_exit(task)
            with self._lock:
                if not task.terminal:
                    self._set_state(task, TaskState.FAILED, TransitionEvent.WORKER_REPORTED_FAILURE)
            raise ProcessGone(task.task_id) from None
        if not confirmed:
            self._fail_stuck(task, "did not continue within timeout")

    def kill(self, task: LocalTask) -> None:
        if task.terminal:
            return
        with self._lock:
            task.killed_by_worker = True
        try:
            # SIGKILL takes effect on a stopped process without a SIGCONT first
            os.killpg(task.process.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        self._await_exit(task, timeout=10.0)
        shutil.rmtree(task.temp_output_dir, ignore_errors=True)
        with self._lock:
            if not task.terminal:
                self._set_state(task, TaskState.KILLED, TransitionEvent.WORKER_CONFIRMED_KILLED)
        self._wake.set()

    def sample_memory(self, task: LocalTask) -> tuple[int, int]:
        if task.process is None or task.process.poll() is not None:
            raise Unsupported(f"{task.task_id} has exited")
        return sample_memory_pid(task.process.pid)

    def _sample(self, task: LocalTask) -> None:
        try:
            rss, swap = self.sample_memory(task)
        except Unsupported:
            return
        task.memory_sampled = True
        task.resident_bytes = rss
        task.swapped_bytes = swap
        task.swapped_bytes_peak = max(task.swapped_bytes_peak, swap)

    # -- heartbeat protocol -------------------------------------------------

    def build_heartbeat(self) -> HeartbeatMessage:
        with self._lock:
            reports = []
            for task in self.tasks.values():
                if not task.terminal:
                    self._sample(task)
                    self._drain(task)
                reports.append(task.report())
            self.sequence_no += 1
            return HeartbeatMessage(
                worker_id=self.worker_id,
                sequence_no=self.sequence_no,
                task_reports=tuple(reports),
                free_slots=self.free_slots(),
                timestamp=now_ms(),
            )

    def acknowledge(self, hb: HeartbeatMessage) -> None:
        """Forget terminal tasks whose final state was just delivered."""
        with self._lock:
            for report in hb.task_reports:
                if report.observed_state.terminal:
                    task = self.tasks.get(report.task_id)
                    if task is not None and task.observed_state is report.observed_state:
                        task.reported_terminal = True
                        del self.tasks[report.task_id]

    def apply(self, reply: CommandMessage) -> None:
        for d in reply.directives:
            try:
                self._apply_one(d)
            except Exception:
                log.exception("directive %s for %s failed", d.action.value, d.task_id)

    def _apply_one(self, d) -> None:
        if d.action is Action.LAUNCH:
            try:
                self.launch(d.payload)
            except (NoFreeSlot, SpawnFailure) as exc:
                log.error("launch of %s failed: %s", d.task_id, exc)
                task = LocalTask(d.task_id, d.payload, None, self.task_output_dir(d.task_id),
                                 observed_state=TaskState.FAILED)
                with self._lock:
                    self.tasks[d.task_id] = task
                self.events.record(d.task_id, None, TransitionEvent.WORKER_REPORTED_FAILURE,
                                   TaskState.FAILED, worker_id=self.worker_id, error=str(exc))
            return
        task = self.tasks.get(d.task_id)
        if task is None:
            log.warning("directive %s for unknown task %s ignored", d.action.value, d.task_id)
            return
        try:
            if d.action is Action.SUSPEND:
                self.suspend(task)
            elif d.action is Action.RESUME:
                self.resume(task)
            elif d.action is Action.KILL:
                self.kill(task)
        except ProcessGone:
            log.info("%s exited before %s; reporting %s", d.task_id, d.action.value, task.observed_state.value)
        except IllegalTransition as exc:
            log.warning("%s: %s", d.task_id, exc)

    def beat_once(self, sock: socket.socket) -> CommandMessage:
        hb = self.build_heartbeat()
        send_message(sock, hb)
        reply = recv_message(sock)
        if not isinstance(reply, CommandMessage):
            raise MalformedMessage(f"expected command reply, got {type(reply).__name__}")
        self.acknowledge(hb)
        self.apply(reply)
        return reply

    def _connect(self) -> socket.socket:
        host, port = parse_address(self.coordinator)
        sock = socket.create_connection((host, port), timeout=10)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        local = "%s:%d" % sock.getsockname()[:2]
        send_message(sock, RegisterMessage(self.worker_id, local, self.slots, self.max_suspended))
        reply = recv_message(sock)
        if isinstance(reply, ControlReply) and not reply.ok:
            raise ConnectionError(f"registration refused: {reply.error}")
        return sock

    def heartbeat_loop(self) -> None:
        backoff = 0
        interval = self.heartbeat_ms / 1000.0
        while not self._stop.is_set():
            try:
                if self._sock is None:
                    self._sock = self._connect()
                self.beat_once(self._sock)
                backoff = 0
            except (OSError, ConnectionError, MalformedMessage) as exc:
                log.warning("heartbeat failed: %s", exc)
                if self._sock is not None:
                    self._sock.close()
                    self._sock = None
                backoff = min(backoff + 1, 6)
                self._stop.wait(min(interval * 2 ** backoff, 2.0))
                continue
            except Exception:
                log.exception("heartbeat loop error")
            self._wake.wait(interval)
            self._wake.clear()

    def start(self) -> threading.Thread:
        self._thread = threading.Thread(target=self.heartbeat_loop, name=f"heartbeat-{self.worker_id}", daemon=True)
        self._thread.start()
        return self._thread

    def stop(self, kill_tasks: bool = True) -> None:
        self._stop.set()
        self._wake.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        if kill_tasks:
            for task in list(self.tasks.values()):
                if task.process is not None and task.process.poll() is None:
                    self.kill(task)
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        self.events.close()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="preempt-worker", description="Run a task worker.")
    p.add_argument("--coordinator", required=True, help="host:port of the coordinator")
    p.add_argument("--slots", type=int, default=1)
    p.add_argument("--max-suspended", type=int, default=1)
    p.add_argument("--heartbeat-ms", type=float, default=DEFAULT_HEARTBEAT_MS)
    p.add_argument("--workdir", required=True)
    p.add_argument("--worker-id", default=None)
    p.add_argument("--event-log", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    worker = Worker(
        workdir=args.workdir, slots=args.slots, max_suspended=args.max_suspended,
        heartbeat_ms=args.heartbeat_ms, coordinator=args.coordinator,
        worker_id=args.worker_id, event_log=args.event_log,
    )
    signal.signal(signal.SIGTERM, lambda *_: worker._stop.set())
    try:
        worker.heartbeat_loop()
    except KeyboardInterrupt:
        pass
    finally:
        worker.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
