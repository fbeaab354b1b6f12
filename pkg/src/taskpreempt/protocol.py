"""Task lifecycle state machine and the coordinator/worker wire format.

Everything here is a value type or a pure function. Frames are a 4-byte
big-endian length followed by a UTF-8 JSON object whose first field ``v`` is
the schema version (see ``docs/wire_format.md``).
"""
from __future__ import annotations

import enum
import json
import math
import socket
import struct
from dataclasses import dataclass, field
from typing import Any, Optional, Union

SCHEMA_VERSION = 1
MAX_FRAME_BYTES = 1 << 20
HEADER = struct.Struct(">I")


class TaskState(str, enum.Enum):
    PENDING = "PENDING"
    LAUNCHING = "LAUNCHING"
    RUNNING = "RUNNING"
    MUST_SUSPEND = "MUST_SUSPEND"
    SUSPENDING_SENT = "SUSPENDING_SENT"
    SUSPENDED = "SUSPENDED"
    MUST_RESUME = "MUST_RESUME"
    RESUMING_SENT = "RESUMING_SENT"
    MUST_KILL = "MUST_KILL"
    KILLED = "KILLED"
    CLEANUP = "CLEANUP"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


TERMINAL_STATES = frozenset({TaskState.SUCCEEDED, TaskState.KILLED, TaskState.FAILED})
# states a worker may put in a task report
OBSERVABLE_STATES = frozenset(
    {TaskState.RUNNING, TaskState.SUSPENDED, TaskState.SUCCEEDED, TaskState.FAILED, TaskState.KILLED}
)


class TransitionEvent(str, enum.Enum):
    LAUNCH = "launch"
    LAUNCHED = "launched"
    SCHEDULER_SUSPEND = "scheduler_suspend"
    SCHEDULER_RESUME = "scheduler_resume"
    SCHEDULER_KILL = "scheduler_kill"
    COMMAND_SENT = "command_sent"
    WORKER_CONFIRMED_SUSPENDED = "worker_confirmed_suspended"
    WORKER_CONFIRMED_RUNNING = "worker_confirmed_running"
    WORKER_REPORTED_SUCCESS = "worker_reported_success"
    WORKER_REPORTED_FAILURE = "worker_reported_failure"
    WORKER_CONFIRMED_KILLED = "worker_confirmed_killed"
    CLEANUP_DONE = "cleanup_done"


S, E = TaskState, TransitionEvent

TRANSITIONS: dict[tuple[TaskState, TransitionEvent], TaskState] = {
    (S.PENDING, E.LAUNCH): S.LAUNCHING,
    # LAUNCH directive left in the heartbeat reply; wait for the worker's RUNNING report
    (S.LAUNCHING, E.COMMAND_SENT): S.LAUNCHING,
    (S.LAUNCHING, E.LAUNCHED): S.RUNNING,
    (S.LAUNCHING, E.WORKER_REPORTED_SUCCESS): S.SUCCEEDED,
    (S.LAUNCHING, E.WORKER_REPORTED_FAILURE): S.FAILED,
    (S.RUNNING, E.SCHEDULER_SUSPEND): S.MUST_SUSPEND,
    (S.RUNNING, E.SCHEDULER_KILL): S.MUST_KILL,
    (S.RUNNING, E.WORKER_REPORTED_SUCCESS): S.SUCCEEDED,
    (S.RUNNING, E.WORKER_REPORTED_FAILURE): S.FAILED,
    (S.MUST_SUSPEND, E.COMMAND_SENT): S.SUSPENDING_SENT,
    (S.MUST_SUSPEND, E.WORKER_REPORTED_SUCCESS): S.SUCCEEDED,
    (S.MUST_SUSPEND, E.WORKER_REPORTED_FAILURE): S.FAILED,
    (S.SUSPENDING_SENT, E.WORKER_CONFIRMED_SUSPENDED): S.SUSPENDED,
    (S.SUSPENDING_SENT, E.WORKER_REPORTED_SUCCESS): S.SUCCEEDED,
    (S.SUSPENDING_SENT, E.WORKER_REPORTED_FAILURE): S.FAILED,
    (S.SUSPENDED, E.SCHEDULER_RESUME): S.MUST_RESUME,
    (S.SUSPENDED, E.SCHEDULER_KILL): S.MUST_KILL,
    (S.SUSPENDED, E.WORKER_REPORTED_FAILURE): S.FAILED,
    (S.MUST_RESUME, E.COMMAND_SENT): S.RESUMING_SENT,
    (S.MUST_RESUME, E.WORKER_REPORTED_FAILURE): S.FAILED,
    (S.RESUMING_SENT, E.WORKER_CONFIRMED_RUNNING): S.RUNNING,
    (S.RESUMING_SENT, E.WORKER_REPORTED_SUCCESS): S.SUCCEEDED,
    (S.RESUMING_SENT, E.WORKER_REPORTED_FAILURE): S.FAILED,
    (S.MUST_KILL, E.COMMAND_SENT): S.MUST_KILL,
    (S.MUST_KILL, E.WORKER_CONFIRMED_KILLED): S.CLEANUP,
    (S.MUST_KILL, E.WORKER_REPORTED_SUCCESS): S.SUCCEEDED,
    (S.MUST_KILL, E.WORKER_REPORTED_FAILURE): S.FAILED,
    (S.CLEANUP, E.CLEANUP_DONE): S.KILLED,
}

del S, E


class ProtocolError(Exception):
    pass


class IllegalTransition(ProtocolError):
    def __init__(self, current: TaskState, event: TransitionEvent):
        super().__init__(f"illegal transition: {current.value} --{event.value}-->")
        self.current = current
        self.event = event


class MalformedMessage(ProtocolError):
    pass


def apply_transition(current: TaskState, event: TransitionEvent) -> TaskState:
    try:
        return TRANSITIONS[(TaskState(current), TransitionEvent(event))]
    except KeyError:
        raise IllegalTransition(TaskState(current), TransitionEvent(event)) from None


# ---------------------------------------------------------------------------
# messages


class Action(str, enum.Enum):
    LAUNCH = "LAUNCH"
    SUSPEND = "SUSPEND"
    RESUME = "RESUME"
    KILL = "KILL"


@dataclass(frozen=True)
class TaskLaunchDescriptor:
    task_id: str
    executable: str
    args: tuple[str, ...]
    input_path: str
    input_bytes: int
    ballast_bytes: int = 0
    progress_interval: int = 100
    tuple_bytes: int = 1024
    attempt: int = 1

    def __post_init__(self):
        if self.input_bytes <= 0:
            raise ValueError("input_bytes must be positive")
        if self.ballast_bytes < 0:
            raise ValueError("ballast_bytes must be non-negative")
        if self.progress_interval <= 0 or self.tuple_bytes <= 0:
            raise ValueError("progress_interval and tuple_bytes must be positive")

    @property
    def input_tuples(self) -> int:
        return self.input_bytes // self.tuple_bytes


@dataclass(frozen=True)
class TaskReport:
    """One task's state as seen by a worker.

    ``swapped_bytes`` is the peak per-process swap observed for the attempt;
    ``memory_sampled`` is False when the platform has no per-process
    accounting, in which case both byte counts are 0 and meaningless.
    ``summary_tuples`` carries the task's final self-report once it exits
    cleanly; ``records_while_suspended`` counts progress records the worker
    received while it believed the task stopped.
    """

    task_id: str
    observed_state: TaskState
    progress_fraction: float = 0.0
    resident_bytes: int = 0
    swapped_bytes: int = 0
    memory_sampled: bool = True
    summary_tuples: Optional[int] = None
    records_while_suspended: int = 0


@dataclass(frozen=True)
class RegisterMessage:
    worker_id: str
    address: str
    slots_total: int
    max_suspended: int


@dataclass(frozen=True)
class HeartbeatMessage:
    worker_id: str
    sequence_no: int
    task_reports: tuple[TaskReport, ...] = ()
    free_slots: int = 0
    timestamp: float = 0.0


@dataclass(frozen=True)
class Directive:
    task_id: str
    action: Action
    payload: Optional[TaskLaunchDescriptor] = None


@dataclass(frozen=True)
class CommandMessage:
    directives: tuple[Directive, ...] = ()

    def __post_init__(self):
        ids = [d.task_id for d in self.directives]
        if len(ids) != len(set(ids)):
            raise ValueError("at most one directive per task per message")


@dataclass(frozen=True)
class ControlRequest:
    op: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ControlReply:
    ok: bool
    result: Any = None
    error: Optional[str] = None
    error_type: Optional[str] = None


Message = Union[RegisterMessage, HeartbeatMessage, CommandMessage, ControlRequest, ControlReply]


# ---------------------------------------------------------------------------
# (de)serialization


def _descriptor_to_dict(d: TaskLaunchDescriptor) -> dict:
    return {
        "task_id": d.task_id,
        "executable": d.executable,
        "args": list(d.args),
        "input_path": d.input_path,
        "input_bytes": d.input_bytes,
        "ballast_bytes": d.ballast_bytes,
        "progress_interval": d.progress_interval,
        "tuple_bytes": d.tuple_bytes,
        "attempt": d.attempt,
    }


def _report_to_dict(r: TaskReport) -> dict:
    return {
        "task_id": r.task_id,
        "observed_state": r.observed_state.value,
        "progress_fraction": r.progress_fraction,
        "resident_bytes": r.resident_bytes,
        "swapped_bytes": r.swapped_bytes,
        "memory_sampled": r.memory_sampled,
        "summary_tuples": r.summary_tuples,
        "records_while_suspended": r.records_while_suspended,
    }


def to_dict(msg: Message) -> dict:
    if isinstance(msg, RegisterMessage):
        body = {
            "kind": "register",
            "worker_id": msg.worker_id,
            "address": msg.address,
            "slots_total": msg.slots_total,
            "max_suspended": msg.max_suspended,
        }
    elif isinstance(msg, HeartbeatMessage):
        body = {
            "kind": "heartbeat",
            "worker_id": msg.worker_id,
            "sequence_no": msg.sequence_no,
            "task_reports": [_report_to_dict(r) for r in msg.task_reports],
            "free_slots": msg.free_slots,
            "timestamp": msg.timestamp,
        }
    elif isinstance(msg, CommandMessage):
        body = {
            "kind": "command",
            "directives": [
                {
                    "task_id": d.task_id,
                    "action": d.action.value,
                    "payload": None if d.payload is None else _descriptor_to_dict(d.payload),
                }
                for d in msg.directives
            ],
        }
    elif isinstance(msg, ControlRequest):
        body = {"kind": "control", "op": msg.op, "args": msg.args}
    elif isinstance(msg, ControlReply):
        body = {
            "kind": "control_reply",
            "ok": msg.ok,
            "result": msg.result,
            "error": msg.error,
            "error_type": msg.error_type,
        }
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    return {"v": SCHEMA_VERSION, **body}


def encode_message(msg: Message) -> bytes:
    payload = json.dumps(to_dict(msg), separators=(",", ":"), allow_nan=False).encode()
    if len(payload) > MAX_FRAME_BYTES:
        raise ValueError(f"message too large: {len(payload)} bytes")
    return HEADER.pack(len(payload)) + payload


class _Fields:
    """Typed field access on a decoded JSON object; any mismatch is malformed."""

    def __init__(self, obj: Any, where: str):
        if not isinstance(obj, dict):
            raise MalformedMessage(f"{where}: expected object")
        self.obj = obj
        self.where = where

    def get(self, key: str, kind, optional: bool = False):
        if key not in self.obj:
            raise MalformedMessage(f"{self.where}: missing field {key!r}")
        value = self.obj[key]
        if value is None and optional:
            return None
        if kind is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
            value = float(value) if ok else value
        elif kind is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, kind)
        if not ok:
            raise MalformedMessage(f"{self.where}: field {key!r} has wrong type")
        return value

    def nonneg(self, key: str) -> int:
        value = self.get(key, int)
        if value < 0:
            raise MalformedMessage(f"{self.where}: field {key!r} must be >= 0")
        return value


def _enum(kind, value, where):
    try:
        return kind(value)
    except ValueError:
        raise MalformedMessage(f"{where}: bad value {value!r}") from None


def _descriptor_from(obj) -> TaskLaunchDescriptor:
    f = _Fields(obj, "payload")
    args = f.get("args", list)
    if not all(isinstance(a, str) for a in args):
        raise MalformedMessage("payload: args must be strings")
    try:
        return TaskLaunchDescriptor(
            task_id=f.get("task_id", str),
            executable=f.get("executable", str),
            args=tuple(args),
            input_path=f.get("input_path", str),
            input_bytes=f.get("input_bytes", int),
            ballast_bytes=f.get("ballast_bytes", int),
            progress_interval=f.get("progress_interval", int),
            tuple_bytes=f.get("tuple_bytes", int),
            attempt=f.get("attempt", int),
        )
    except ValueError as exc:
        raise MalformedMessage(f"payload: {exc}") from None


def _report_from(obj) -> TaskReport:
    f = _Fields(obj, "task_report")
    state = _enum(TaskState, f.get("observed_state", str), "task_report")
    if state not in OBSERVABLE_STATES:
        raise MalformedMessage(f"task_report: {state.value} is not worker-observable")
    progress = f.get("progress_fraction", float)
    if not 0.0 <= progress <= 1.0:
        raise MalformedMessage("task_report: progress_fraction outside [0, 1]")
    summary = f.get("summary_tuples", int, optional=True)
    if summary is not None and summary < 0:
        raise MalformedMessage("task_report: summary_tuples must be >= 0")
    return TaskReport(
        task_id=f.get("task_id", str),
        observed_state=state,
        progress_fraction=progress,
        resident_bytes=f.nonneg("resident_bytes"),
        swapped_bytes=f.nonneg("swapped_bytes"),
        memory_sampled=f.get("memory_sampled", bool),
        summary_tuples=summary,
        records_while_suspended=f.nonneg("records_while_suspended"),
    )


def from_dict(obj: Any) -> Message:
    f = _Fields(obj, "message")
    version = f.get("v", int)
    if version != SCHEMA_VERSION:
        raise MalformedMessage(f"unsupported schema version {version}")
    kind = f.get("kind", str)
    if kind == "register":
        return RegisterMessage(
            worker_id=f.get("worker_id", str),
            address=f.get("address", str),
            slots_total=f.nonneg("slots_total"),
            max_suspended=f.nonneg("max_suspended"),
        )
    if kind == "heartbeat":
        return HeartbeatMessage(
            worker_id=f.get("worker_id", str),
            sequence_no=f.nonneg("sequence_no"),
            task_reports=tuple(_report_from(r) for r in f.get("task_reports", list)),
            free_slots=f.nonneg("free_slots"),
            timestamp=f.get("timestamp", float),
        )
    if kind == "command":
        directives = []
        for raw in f.get("directives", list):
            d = _Fields(raw, "directive")
            action = _enum(Action, d.get("action", str), "directive")
            payload = d.get("payload", dict, optional=True)
            if (action is Action.LAUNCH) != (payload is not None):
                raise MalformedMessage("directive: payload required for LAUNCH only")
            directives.append(
                Directive(
                    task_id=d.get("task_id", str),
                    action=action,
                    payload=None if payload is None else _descriptor_from(payload),
                )
            )
        try:
            return CommandMessage(tuple(directives))
        except ValueError as exc:
            raise MalformedMessage(str(exc)) from None
    if kind == "control":
        return ControlRequest(op=f.get("op", str), args=f.get("args", dict))
    if kind == "control_reply":
        return ControlReply(
            ok=f.get("ok", bool),
            result=f.obj.get("result"),
            error=f.get("error", str, optional=True),
            error_type=f.get("error_type", str, optional=True),
        )
    raise MalformedMessage(f"unknown message kind {kind!r}")


def decode_payload(payload: bytes) -> Message:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessage(f"payload is not JSON: {exc}") from None
    return from_dict(obj)


def decode_message(data: bytes) -> Message:
    """Decode exactly one complete frame."""
    if len(data) < HEADER.size:
        raise MalformedMessage(f"truncated header ({len(data)} bytes)")
    (length,) = HEADER.unpack_from(data)
    if length > MAX_FRAME_BYTES:
        raise MalformedMessage(f"frame of {length} bytes exceeds limit")
    if len(data) - HEADER.size != length:
        raise MalformedMessage(f"frame length {length} does not match {len(data) - HEADER.size} payload bytes")
    return decode_payload(bytes(data[HEADER.size:]))


# ---------------------------------------------------------------------------
# socket helpers


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf.extend(chunk)
    return bytes(buf)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def recv_message(sock: socket.socket) -> Message:
    header = _recv_exactly(sock, HEADER.size)
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise MalformedMessage(f"frame of {length} bytes exceeds limit")
    return decode_payload(_recv_exactly(sock, length))


def parse_address(addr: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return (host or default_host, int(port))
