"""Central task tracker: applies the lifecycle state machine and piggybacks commands on heartbeat replies."""
from __future__ import annotations

import argparse
import copy
import dataclasses
import enum
import itertools
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .eventlog import EventLog, now_ms
from .protocol import (
    Action,
    CommandMessage,
    ControlReply,
    ControlRequest,
    Directive,
    HeartbeatMessage,
    IllegalTransition,
    MalformedMessage,
    ProtocolError,
    RegisterMessage,
    TaskLaunchDescriptor,
    TaskReport,
    TaskState,
    TransitionEvent,
    apply_transition,
    parse_address,
    recv_message,
    send_message,
)

log = logging.getLogger(__name__)


class Priority(str, enum.Enum):
    HIGH = "HIGH"
    LOW = "LOW"


class Primitive(str, enum.Enum):
    SUSPEND = "SUSPEND"
    KILL = "KILL"


class CoordinatorError(Exception):
    pass


class UnknownWorker(CoordinatorError):
    pass


class UnknownTask(CoordinatorError):
    pass


class DuplicateTask(CoordinatorError):
    pass


class SwapBudgetExceeded(CoordinatorError):
    pass


class WorkerLost(CoordinatorError):
    def __init__(self, task_id: str, worker_id: str, attempt: int):
        super().__init__(f"worker {worker_id} of suspended task {task_id} is gone; restarted as attempt {attempt}")
        self.task_id = task_id
        self.worker_id = worker_id
        self.attempt = attempt


class StaleSequence(CoordinatorError):
    pass


# record states that hold a run slot on their worker
SLOT_HOLDING = frozenset({
    TaskState.LAUNCHING, TaskState.RUNNING, TaskState.MUST_SUSPEND, TaskState.SUSPENDING_SENT,
    TaskState.MUST_RESUME, TaskState.RESUMING_SENT, TaskState.MUST_KILL, TaskState.CLEANUP,
})
SUSPEND_HOLDING = frozenset({TaskState.MUST_SUSPEND, TaskState.SUSPENDING_SENT, TaskState.SUSPENDED})


@dataclass
class TaskRecord:
    task_id: str
    descriptor: TaskLaunchDescriptor
    priority: Priority
    state: TaskState = TaskState.PENDING
    assigned_worker: Optional[str] = None
    target_worker: Optional[str] = None
    progress_fraction: float = 0.0
    submit_time: float = 0.0
    first_launch_time: Optional[float] = None
    launch_times: list = field(default_factory=list)
    suspend_times: list = field(default_factory=list)
    resume_times: list = field(default_factory=list)
    completion_time: Optional[float] = None
    swapped_bytes_peak: int = 0
    resident_bytes: int = 0
    memory_sampled: bool = False
    attempt_count: int = 1
    summary_tuples: Optional[int] = None
    records_while_suspended: int = 0
    attempts: list = field(default_factory=list)  # finished earlier attempts

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["descriptor"] = dataclasses.asdict(self.descriptor)
        d["descriptor"]["args"] = list(self.descriptor.args)
        d["priority"] = self.priority.value
        d["state"] = self.state.value
        return d


@dataclass
class WorkerRecord:
    worker_id: str
    address: str
    slots_total: int
    max_suspended: int
    slots_running: int = 0
    slots_suspended: int = 0
    last_heartbeat: float = 0.0
    last_sequence_no: int = 0
    reported_free_slots: Optional[int] = None
    reported_running: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CoordinatorConfig:
    heartbeat_ms: float = 300.0
    dead_after_missed: int = 10
    # swap admission: (suspended + slots_total) * task_memory_cap must fit memory_budget
    task_memory_cap_bytes: Optional[int] = None
    memory_budget_bytes: Optional[int] = None
    event_log: Optional[str] = None


Listener = Callable[[str, dict], None]


class Coordinator:
    def __init__(self, config: Optional[CoordinatorConfig] = None):
        self.config = config or CoordinatorConfig()
        self.tasks: dict[str, TaskRecord] = {}
        self.workers: dict[str, WorkerRecord] = {}
        self.events = EventLog(self.config.event_log)
        self._queued: dict[str, list[Directive]] = {}
        self._listeners: list[Listener] = []
        self._lock = threading.RLock()
        self._ids = itertools.count(1)

    # -- plumbing -----------------------------------------------------------

    def add_listener(self, fn: Listener) -> None:
        with self._lock:
            self._listeners.append(fn)

    def _notify(self, kind: str, payload: dict) -> None:
        for fn in self._listeners:
            try:
                fn(kind, payload)
            except Exception:
                log.exception("listener failed")

    def _task(self, task_id: str) -> TaskRecord:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def _transition(self, rec: TaskRecord, event: TransitionEvent, **extra) -> TaskState:
        old = rec.state
        new = apply_transition(old, event)  # raises before anything is mutated
        now = now_ms()
        rec.state = new
        if event is TransitionEvent.LAUNCH:
            rec.launch_times.append(now)
            if rec.first_launch_time is None:
                rec.first_launch_time = now
        elif new is TaskState.SUSPENDED:
            rec.suspend_times.append(now)
        elif new is TaskState.RUNNING and old is TaskState.RESUMING_SENT:
            rec.resume_times.append(now)
        if new.terminal:
            rec.completion_time = now
        entry = self.events.record(rec.task_id, old, event, new, attempt=rec.attempt_count, **extra)
        self._notify("transition", {**entry, "record": copy.deepcopy(rec)})
        return new

    def _queue(self, worker_id: str, directive: Directive) -> None:
        queue = self._queued.setdefault(worker_id, [])
        queue[:] = [d for d in queue if d.task_id != directive.task_id]
        queue.append(directive)

    def _refresh_slots(self, worker: WorkerRecord) -> None:
        running = suspended = 0
        for rec in self.tasks.values():
            if rec.assigned_worker == worker.worker_id:
                if rec.state in SLOT_HOLDING:
                    running += 1
                elif rec.state is TaskState.SUSPENDED:
                    suspended += 1
        worker.slots_running = running
        worker.slots_suspended = suspended

    def worker_alive(self, worker_id: str, now: Optional[float] = None) -> bool:
        worker = self.workers.get(worker_id)
        if worker is None:
            return False
        now = now_ms() if now is None else now
        return now - worker.last_heartbeat <= self.config.dead_after_missed * self.config.heartbeat_ms

    # -- worker-facing ------------------------------------------------------

    def register_worker(self, msg: RegisterMessage) -> WorkerRecord:
        with self._lock:
            worker = self.workers.get(msg.worker_id)
            if worker is None:
                worker = WorkerRecord(msg.worker_id, msg.address, msg.slots_total, msg.max_suspended)
                self.workers[msg.worker_id] = worker
            else:
                # a restarted worker starts its sequence numbers over
                worker.address = msg.address
                worker.slots_total = msg.slots_total
                worker.max_suspended = msg.max_suspended
                worker.last_sequence_no = 0
            worker.last_heartbeat = now_ms()
            self._refresh_slots(worker)
            return copy.deepcopy(worker)

    def handle_heartbeat(self, hb: HeartbeatMessage) -> CommandMessage:
        with self._lock:
            worker = self.workers.get(hb.worker_id)
            if worker is None:
                raise UnknownWorker(hb.worker_id)
            if hb.sequence_no <= worker.last_sequence_no:
                log.debug("stale heartbeat %d from %s dropped", hb.sequence_no, hb.worker_id)
                return CommandMessage()
            worker.last_sequence_no = hb.sequence_no
            worker.last_heartbeat = now_ms()
            worker.reported_free_slots = hb.free_slots
            worker.reported_running = sum(1 for r in hb.task_reports if r.observed_state is TaskState.RUNNING)
            for report in hb.task_reports:
                try:
                    self._apply_report(worker, report)
                except IllegalTransition as exc:
                    log.error("protocol error from %s on %s: %s", hb.worker_id, report.task_id, exc)
            self._refresh_slots(worker)
            self._place_pending(worker)
            return self._drain_directives(worker)

    def _apply_report(self, worker: WorkerRecord, report: TaskReport) -> None:
        rec = self.tasks.get(report.task_id)
        if rec is None or rec.assigned_worker != worker.worker_id:
            log.warning("report for %s not assigned to %s ignored", report.task_id, worker.worker_id)
            return
        if rec.state.terminal or rec.state is TaskState.PENDING:
            return  # duplicate final report, or a stale one from an earlier attempt
        observed = report.observed_state
        if report.progress_fraction >= rec.progress_fraction:
            rec.progress_fraction = report.progress_fraction
        rec.resident_bytes = report.resident_bytes
        rec.memory_sampled = report.memory_sampled
        rec.swapped_bytes_peak = max(rec.swapped_bytes_peak, report.swapped_bytes)
        rec.records_while_suspended = report.records_while_suspended
        if report.summary_tuples is not None:
            rec.summary_tuples = report.summary_tuples

        event = None
        if observed is TaskState.RUNNING:
            if rec.state is TaskState.LAUNCHING:
                event = TransitionEvent.LAUNCHED
            elif rec.state is TaskState.RESUMING_SENT:
                event = TransitionEvent.WORKER_CONFIRMED_RUNNING
        elif observed is TaskState.SUSPENDED:
            if rec.state is TaskState.SUSPENDING_SENT:
                event = TransitionEvent.WORKER_CONFIRMED_SUSPENDED
        elif observed is TaskState.SUCCEEDED:
            event = TransitionEvent.WORKER_REPORTED_SUCCESS
        elif observed is TaskState.FAILED:
            event = TransitionEvent.WORKER_REPORTED_FAILURE
        elif observed is TaskState.KILLED:
            event = TransitionEvent.WORKER_CONFIRMED_KILLED

        if event is not None:
            self._transition(rec, event)
            if rec.state is TaskState.CLEANUP:
                # the worker removes temporary outputs before it reports KILLED
                self._transition(rec, TransitionEvent.CLEANUP_DONE)
        if rec.state in (TaskState.RUNNING, TaskState.SUCCEEDED) or observed is TaskState.RUNNING:
            self._notify("progress", {
                "task_id": rec.task_id,
                "progress_fraction": rec.progress_fraction,
                "state": rec.state.value,
                "timestamp": now_ms(),
            })

    def _pending_order(self):
        pending = [r for r in self.tasks.values() if r.state is TaskState.PENDING]
        return sorted(pending, key=lambda r: (r.priority is not Priority.HIGH, r.submit_time))

    def _place_pending(self, worker: WorkerRecord) -> None:
        for rec in self._pending_order():
            if worker.slots_running >= worker.slots_total:
                return
            if rec.target_worker not in (None, worker.worker_id):
                continue
            rec.assigned_worker = worker.worker_id
            descriptor = dataclasses.replace(rec.descriptor, attempt=rec.attempt_count)
            self._transition(rec, TransitionEvent.LAUNCH, worker_id=worker.worker_id)
            self._queue(worker.worker_id, Directive(rec.task_id, Action.LAUNCH, descriptor))
            worker.slots_running += 1

    def _drain_directives(self, worker: WorkerRecord) -> CommandMessage:
        queued = self._queued.pop(worker.worker_id, [])
        out = []
        for d in queued:
            rec = self.tasks.get(d.task_id)
            if rec is None or rec.state.terminal:
                # e.g. completion raced ahead of a queued SUSPEND
                self.events.record(d.task_id, rec.state if rec else None, "directive_dropped",
                                   rec.state if rec else None, action=d.action.value)
                continue
            self._transition(rec, TransitionEvent.COMMAND_SENT, action=d.action.value, worker_id=worker.worker_id)
            out.append(d)
        return CommandMessage(tuple(out))

    # -- control API --------------------------------------------------------

    def submit_task(self, descriptor: TaskLaunchDescriptor, priority=Priority.LOW,
                    target_worker: Optional[str] = None) -> str:
        priority = Priority(priority)
        with self._lock:
            if target_worker is not None and target_worker not in self.workers:
                raise UnknownWorker(target_worker)
            task_id = descriptor.task_id
            if not task_id:
                task_id = f"task-{next(self._ids):04d}"
                while task_id in self.tasks:
                    task_id = f"task-{next(self._ids):04d}"
                descriptor = dataclasses.replace(descriptor, task_id=task_id)
            elif task_id in self.tasks:
                raise DuplicateTask(task_id)
            rec = TaskRecord(task_id, descriptor, priority, target_worker=target_worker, submit_time=now_ms())
            self.tasks[task_id] = rec
            entry = self.events.record(task_id, None, "submit", TaskState.PENDING, priority=priority.value)
            self._notify("transition", {**entry, "record": copy.deepcopy(rec)})
            return task_id

    def _check_swap_budget(self, rec: TaskRecord) -> None:
        worker = self.workers[rec.assigned_worker]
        suspended = sum(
            1 for r in self.tasks.values()
            if r.assigned_worker == worker.worker_id and r.state in SUSPEND_HOLDING
        )
        if suspended + 1 > worker.max_suspended:
            raise SwapBudgetExceeded(
                f"worker {worker.worker_id} already holds {suspended} suspended task(s) (max {worker.max_suspended})")
        cap, budget = self.config.task_memory_cap_bytes, self.config.memory_budget_bytes
        if cap is not None and budget is not None:
            need = (suspended + 1 + worker.slots_total) * cap
            if need > budget:
                raise SwapBudgetExceeded(f"{need} bytes of task memory would exceed budget {budget}")

    def request_preemption(self, task_id: str, primitive=Primitive.SUSPEND) -> TaskState:
        primitive = Primitive(primitive)
        with self._lock:
            rec = self._task(task_id)
            if rec.state is not TaskState.RUNNING:
                raise IllegalTransition(
                    rec.state,
                    TransitionEvent.SCHEDULER_SUSPEND if primitive is Primitive.SUSPEND else TransitionEvent.SCHEDULER_KILL,
                )
            if primitive is Primitive.SUSPEND:
                self._check_swap_budget(rec)
                self._transition(rec, TransitionEvent.SCHEDULER_SUSPEND)
                self._queue(rec.assigned_worker, Directive(task_id, Action.SUSPEND))
            else:
                self._transition(rec, TransitionEvent.SCHEDULER_KILL)
                self._queue(rec.assigned_worker, Directive(task_id, Action.KILL))
            return rec.state

    def request_kill(self, task_id: str) -> TaskState:
        """Kill a RUNNING or SUSPENDED task."""
        with self._lock:
            rec = self._task(task_id)
            self._transition(rec, TransitionEvent.SCHEDULER_KILL)
            self._queue(rec.assigned_worker, Directive(task_id, Action.KILL))
            return rec.state

    def request_resume(self, task_id: str) -> TaskState:
        with self._lock:
            rec = self._task(task_id)
            if rec.state is not TaskState.SUSPENDED:
                raise IllegalTransition(rec.state, TransitionEvent.SCHEDULER_RESUME)
            worker_id = rec.assigned_worker
            if not self.worker_alive(worker_id):
                # a suspended process only lives on its original machine: start over
                self._transition(rec, TransitionEvent.WORKER_REPORTED_FAILURE, reason="worker_lost")
                self.reschedule(task_id, exclude_worker=worker_id)
                raise WorkerLost(task_id, worker_id, rec.attempt_count)
            self._transition(rec, TransitionEvent.SCHEDULER_RESUME)
            self._queue(worker_id, Directive(task_id, Action.RESUME))
            return rec.state

    def reschedule(self, task_id: str, exclude_worker: Optional[str] = None) -> int:
        """Start a fresh attempt of a KILLED or FAILED task from progress 0."""
        with self._lock:
            rec = self._task(task_id)
            if rec.state not in (TaskState.KILLED, TaskState.FAILED):
                raise IllegalTransition(rec.state, TransitionEvent.LAUNCH)
            rec.attempts.append({
                "attempt": rec.attempt_count,
                "final_state": rec.state.value,
                "worker": rec.assigned_worker,
                "progress_fraction": rec.progress_fraction,
                "tuples_processed": (
                    rec.summary_tuples if rec.summary_tuples is not None
                    else round(rec.progress_fraction * rec.descriptor.input_tuples)
                ),
                "launch_time": rec.launch_times[-1] if rec.launch_times else None,
                "completion_time": rec.completion_time,
                "swapped_bytes_peak": rec.swapped_bytes_peak,
            })
            old = rec.state
            rec.attempt_count += 1
            rec.state = TaskState.PENDING
            rec.progress_fraction = 0.0
            rec.completion_time = None
            rec.summary_tuples = None
            rec.records_while_suspended = 0
            rec.swapped_bytes_peak = 0
            rec.suspend_times.clear()
            rec.resume_times.clear()
            if exclude_worker is not None:
                others = [w for w in self.workers if w != exclude_worker and self.worker_alive(w)]
                rec.target_worker = others[0] if others else None
            rec.assigned_worker = None
            entry = self.events.record(task_id, old, "reschedule", TaskState.PENDING, attempt=rec.attempt_count)
            self._notify("transition", {**entry, "record": copy.deepcopy(rec)})
            return rec.attempt_count

    def snapshot(self) -> tuple[list[TaskRecord], list[WorkerRecord]]:
        with self._lock:
            return (copy.deepcopy(list(self.tasks.values())), copy.deepcopy(list(self.workers.values())))

    def close(self) -> None:
        self.events.close()


# ---------------------------------------------------------------------------
# TCP front end


def _descriptor_from_args(d: dict) -> TaskLaunchDescriptor:
    d = dict(d)
    d["args"] = tuple(d.get("args", ()))
    return TaskLaunchDescriptor(**d)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        coord: Coordinator = self.server.coordinator
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                msg = recv_message(sock)
            except (ConnectionError, OSError):
                return
            except MalformedMessage as exc:
                send_message(sock, ControlReply(False, error=str(exc), error_type="MalformedMessage"))
                return
            try:
                reply = self.dispatch(coord, msg)
            except (CoordinatorError, ProtocolError, ValueError, TypeError) as exc:
                reply = ControlReply(False, error=str(exc), error_type=type(exc).__name__)
            try:
                send_message(sock, reply)
            except OSError:
                return

    @staticmethod
    def dispatch(coord: Coordinator, msg):
        if isinstance(msg, RegisterMessage):
            return ControlReply(True, result=coord.register_worker(msg).to_dict())
        if isinstance(msg, HeartbeatMessage):
            return coord.handle_heartbeat(msg)
        if isinstance(msg, ControlRequest):
            a = msg.args
            if msg.op == "submit":
                task_id = coord.submit_task(_descriptor_from_args(a["descriptor"]), a.get("priority", "LOW"),
                                            a.get("target_worker"))
                return ControlReply(True, result=task_id)
            if msg.op == "preempt":
                return ControlReply(True, result=coord.request_preemption(a["task_id"], a.get("primitive", "SUSPEND")).value)
            if msg.op == "resume":
                return ControlReply(True, result=coord.request_resume(a["task_id"]).value)
            if msg.op == "kill":
                return ControlReply(True, result=coord.request_kill(a["task_id"]).value)
            if msg.op == "reschedule":
                return ControlReply(True, result=coord.reschedule(a["task_id"]))
            if msg.op == "snapshot":
                tasks, workers = coord.snapshot()
                return ControlReply(True, result={"tasks": [t.to_dict() for t in tasks],
                                                  "workers": [w.to_dict() for w in workers]})
            raise ValueError(f"unknown control op {msg.op!r}")
        raise ValueError(f"unexpected message kind {type(msg).__name__}")


class CoordinatorServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, coordinator: Coordinator, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.coordinator = coordinator
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "CoordinatorServer":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="coordinator", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class CoordinatorClient:
    """Blocking client for the control API."""

    def __init__(self, address: str, timeout: float = 10.0):
        self.sock = socket.create_connection(parse_address(address), timeout=timeout)

    def call(self, op: str, **args):
        send_message(self.sock, ControlRequest(op, args))
        reply = recv_message(self.sock)
        if not isinstance(reply, ControlReply):
            raise MalformedMessage(f"expected control reply, got {type(reply).__name__}")
        if not reply.ok:
            raise CoordinatorError(f"{reply.error_type}: {reply.error}")
        return reply.result

    def submit(self, descriptor: TaskLaunchDescriptor, priority="LOW", target_worker=None) -> str:
        d = dataclasses.asdict(descriptor)
        d["args"] = list(descriptor.args)
        return self.call("submit", descriptor=d, priority=Priority(priority).value, target_worker=target_worker)

    def preempt(self, task_id: str, primitive="SUSPEND") -> str:
        return self.call("preempt", task_id=task_id, primitive=Primitive(primitive).value)

    def resume(self, task_id: str) -> str:
        return self.call("resume", task_id=task_id)

    def snapshot(self) -> dict:
        return self.call("snapshot")

    def close(self) -> None:
        self.sock.close()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="preempt-coordinator", description="Run the task coordinator.")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7070)
    p.add_argument("--heartbeat-ms", type=float, default=300.0)
    p.add_argument("--event-log", default=None)
    p.add_argument("--task-memory-cap", type=int, default=None, help="bytes per task, for swap admission")
    p.add_argument("--memory-budget", type=int, default=None, help="RAM + swap bytes available to tasks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    coord = Coordinator(CoordinatorConfig(
        heartbeat_ms=args.heartbeat_ms, event_log=args.event_log,
        task_memory_cap_bytes=args.task_memory_cap, memory_budget_bytes=args.memory_budget,
    ))
    server = CoordinatorServer(coord, args.host, args.port)
    log.info("listening on %s", server.address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        coord.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
