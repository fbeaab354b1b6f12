"""Static-configuration scheduler for the two-task preemption scenario, plus eviction policies."""
from __future__ import annotations

import enum
import logging
import queue
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .coordinator import Coordinator, Primitive, Priority, TaskRecord
from .eventlog import now_ms
from .protocol import IllegalTransition, TaskLaunchDescriptor, TaskState

log = logging.getLogger(__name__)


class TriggerAction(str, enum.Enum):
    SUSPEND_RESUME = "SUSPEND_RESUME"
    KILL_RESTART = "KILL_RESTART"
    WAIT = "WAIT"


class AfterHigh(str, enum.Enum):
    RESUME_LOW = "RESUME_LOW"
    RESTART_LOW = "RESTART_LOW"
    NOTHING = "NOTHING"


DEFAULT_FOLLOW_UP = {
    TriggerAction.SUSPEND_RESUME: AfterHigh.RESUME_LOW,
    TriggerAction.KILL_RESTART: AfterHigh.RESTART_LOW,
    TriggerAction.WAIT: AfterHigh.NOTHING,
}


class SchedulerError(Exception):
    pass


class TriggerNeverFired(SchedulerError):
    pass


class ScheduleFailed(SchedulerError):
    pass


class ScheduleTimeout(SchedulerError):
    pass


class EmptyCandidates(SchedulerError):
    pass


@dataclass(frozen=True)
class TriggerRule:
    threshold_r: float
    action: TriggerAction
    then_launch: TaskLaunchDescriptor
    after_high_completes: Optional[AfterHigh] = None
    watch_task: Priority = Priority.LOW

    def __post_init__(self):
        object.__setattr__(self, "action", TriggerAction(self.action))
        if self.after_high_completes is None:
            object.__setattr__(self, "after_high_completes", DEFAULT_FOLLOW_UP[self.action])
        object.__setattr__(self, "after_high_completes", AfterHigh(self.after_high_completes))
        if not 0.0 <= self.threshold_r <= 1.0:
            raise ValueError(f"threshold_r={self.threshold_r} outside [0, 1]")
        if self.watch_task is not Priority.LOW:
            raise ValueError("the trigger watches the low-priority task")
        if self.action is not TriggerAction.WAIT and self.after_high_completes is not DEFAULT_FOLLOW_UP[self.action]:
            raise ValueError(f"{self.action.value} requires {DEFAULT_FOLLOW_UP[self.action].value}")


@dataclass(frozen=True)
class ExperimentSpec:
    low: TaskLaunchDescriptor
    rule: TriggerRule
    target_worker: Optional[str] = None
    timeout_s: float = 600.0


@dataclass
class ScheduleOutcome:
    low_id: str
    high_id: str
    action: TriggerAction
    threshold_r: float
    low_submit_time: float
    high_arrival_time: Optional[float] = None  # trigger instant; sojourn is measured from here
    trigger_progress: Optional[float] = None
    low: Optional[TaskRecord] = None
    high: Optional[TaskRecord] = None
    order: list = field(default_factory=list)  # (label, state) in observed order

    @property
    def done_time(self) -> float:
        return max(self.low.completion_time, self.high.completion_time)


def run_schedule(coordinator: Coordinator, spec: ExperimentSpec) -> ScheduleOutcome:
    """Drive one two-task experiment to completion.

    Submits the low-priority task, waits for its progress to reach the
    threshold, applies the configured primitive, launches the high-priority
    task and finally resumes or restarts the low one.
    """
    events: queue.Queue = queue.Queue()
    coordinator.add_listener(lambda kind, payload: events.put((kind, payload)))
    rule = spec.rule

    low_id = coordinator.submit_task(spec.low, Priority.LOW, spec.target_worker)
    out = ScheduleOutcome(low_id, rule.then_launch.task_id, rule.action, rule.threshold_r,
                          low_submit_time=coordinator.tasks[low_id].submit_time)
    labels = {low_id: "low"}
    phase = "await_trigger"
    high_id = None
    low_done = high_done = False
    low_resolved = False  # low no longer needs a follow-up action
    deadline = time.monotonic() + spec.timeout_s

    def submit_high():
        nonlocal high_id
        high_id = coordinator.submit_task(rule.then_launch, Priority.HIGH, spec.target_worker)
        out.high_id = high_id
        labels[high_id] = "high"

    def fire(fraction):
        nonlocal phase, low_resolved
        out.high_arrival_time = now_ms()
        out.trigger_progress = fraction
        log.info("trigger at progress %.4f (r=%.2f), action %s", fraction, rule.threshold_r, rule.action.value)
        if rule.action is TriggerAction.WAIT:
            submit_high()
            low_resolved = True
            phase = "await_high"
        else:
            primitive = Primitive.SUSPEND if rule.action is TriggerAction.SUSPEND_RESUME else Primitive.KILL
            try:
                coordinator.request_preemption(low_id, primitive)
            except IllegalTransition as exc:
                # low finished between its progress report and now; its SUCCEEDED event is queued
                log.info("preemption skipped: %s", exc)
            phase = "await_low_stopped"

    while not (low_done and high_done):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise ScheduleTimeout(f"experiment did not finish within {spec.timeout_s}s (phase {phase})")
        try:
            kind, payload = events.get(timeout=min(remaining, 1.0))
        except queue.Empty:
            continue
        task_id = payload.get("task_id")
        if task_id not in labels:
            continue
        label = labels[task_id]

        if kind == "progress":
            if (phase == "await_trigger" and label == "low" and payload["state"] == TaskState.RUNNING.value
                    and payload["progress_fraction"] >= rule.threshold_r):
                fire(payload["progress_fraction"])
            continue

        new = TaskState(payload["new_state"])
        if payload["event"] not in ("command_sent",):
            out.order.append((label, new.value))
        if new is TaskState.FAILED:
            raise ScheduleFailed(f"{label} task {task_id} failed")

        if label == "low":
            if new is TaskState.SUCCEEDED:
                if phase == "await_trigger":
                    raise TriggerNeverFired(
                        f"low task completed before reaching r={rule.threshold_r}")
                if phase == "await_low_stopped":
                    # completion won the race against the preemption command
                    low_resolved = True
                    submit_high()
                    phase = "await_high"
                low_done = True
            elif phase == "await_low_stopped" and new in (TaskState.SUSPENDED, TaskState.KILLED):
                submit_high()
                phase = "await_high"
        else:
            if new is TaskState.SUCCEEDED:
                high_done = True
                if not low_resolved:
                    if rule.after_high_completes is AfterHigh.RESUME_LOW:
                        coordinator.request_resume(low_id)
                    elif rule.after_high_completes is AfterHigh.RESTART_LOW:
                        coordinator.reschedule(low_id)
                    low_resolved = True
                phase = "await_low"

    tasks, _ = coordinator.snapshot()
    by_id = {t.task_id: t for t in tasks}
    out.low = by_id[low_id]
    out.high = by_id[high_id]
    return out


class EvictionPolicy(str, enum.Enum):
    EXPLICIT = "EXPLICIT"
    CLOSEST_TO_COMPLETION = "CLOSEST_TO_COMPLETION"
    SMALLEST_FOOTPRINT = "SMALLEST_FOOTPRINT"


def footprint(rec: TaskRecord) -> int:
    return rec.resident_bytes + rec.swapped_bytes_peak


def select_victim(policy, candidates: Sequence[TaskRecord], explicit: Optional[str] = None) -> str:
    """Choose the running task to preempt; ties go to the smallest task_id."""
    policy = EvictionPolicy(policy)
    if not candidates:
        raise EmptyCandidates("no candidates to evict")
    not_running = [c.task_id for c in candidates if c.state is not TaskState.RUNNING]
    if not_running:
        raise ValueError(f"candidates not RUNNING: {not_running}")
    if policy is EvictionPolicy.EXPLICIT:
        ids = {c.task_id for c in candidates}
        if explicit not in ids:
            raise ValueError(f"configured victim {explicit!r} is not a candidate")
        return explicit
    if policy is EvictionPolicy.CLOSEST_TO_COMPLETION:
        key = lambda c: (-c.progress_fraction, c.task_id)
    else:
        key = lambda c: (footprint(c), c.task_id)
    return min(candidates, key=key).task_id
