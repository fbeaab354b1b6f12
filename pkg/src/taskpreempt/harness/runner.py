"""Run the kill / wait / suspend-resume comparison and write it as CSV."""
from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

import yaml

from ..config import HarnessConfig
from ..coordinator import Coordinator, CoordinatorConfig, CoordinatorServer
from ..protocol import TaskLaunchDescriptor
from ..scheduler import ExperimentSpec, SchedulerError, TriggerAction, TriggerRule, run_schedule
from ..synthetic_task import calibrate_work_factor, generate_input
from ..worker import Worker
from .envprobe import probe_environment
from .metrics import AGGREGATED, AggregateMetrics, RunMetrics, aggregate

log = logging.getLogger(__name__)

ACTIONS = {
    "wait": TriggerAction.WAIT,
    "kill": TriggerAction.KILL_RESTART,
    "suspend_resume": TriggerAction.SUSPEND_RESUME,
}

RUN_COLUMNS = [f.name for f in fields(RunMetrics)]
AGGREGATE_COLUMNS = ["n", "spread_ok"] + [f"{m}_{s}" for m in AGGREGATED for s in ("min", "max")]
CSV_COLUMNS = ["kind"] + RUN_COLUMNS + AGGREGATE_COLUMNS


def resolve_work_factor(config: HarnessConfig) -> int:
    if config.work_factor != "auto":
        return int(config.work_factor)
    n = config.low.input_bytes // config.tuple_bytes
    wf = calibrate_work_factor(config.target_task_seconds, n, config.tuple_bytes)
    log.info("calibrated work factor %d for %.1fs over %d tuples", wf, config.target_task_seconds, n)
    return wf


def ensure_input(data_dir: Path, total_bytes: int, tuple_bytes: int, seed: int) -> Path:
    data_dir.mkdir(parents=True, exist_ok=True)
    path = data_dir / f"input-{total_bytes}-{tuple_bytes}-{seed}.dat"
    if not path.exists() or path.stat().st_size != total_bytes:
        generate_input(path, total_bytes, tuple_bytes, seed)
    return path


def make_descriptor(task_id: str, input_path: Path, size, config: HarnessConfig, work_factor: int,
                    seed: int) -> TaskLaunchDescriptor:
    args = ["-m", "taskpreempt.synthetic_task", "--work-factor", str(work_factor), "--seed", str(seed)]
    if size.verify_ballast:
        args.append("--verify-ballast")
    return TaskLaunchDescriptor(
        task_id=task_id,
        executable=sys.executable,
        args=tuple(args),
        input_path=str(input_path),
        input_bytes=size.input_bytes,
        ballast_bytes=size.ballast_bytes,
        progress_interval=config.progress_interval,
        tuple_bytes=config.tuple_bytes,
    )


class Cluster:
    """A fresh coordinator plus one worker, torn down on exit."""

    def __init__(self, config: HarnessConfig, workdir: Path):
        self.config = config
        self.workdir = Path(workdir)
        self.worker: Optional[Worker] = None
        self.worker_proc: Optional[subprocess.Popen] = None

    def __enter__(self) -> "Cluster":
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.coordinator = Coordinator(CoordinatorConfig(
            heartbeat_ms=self.config.heartbeat_ms, event_log=str(self.workdir / "coordinator-events.jsonl")))
        self.server = CoordinatorServer(self.coordinator).start()
        worker_dir = self.workdir / "worker"
        if self.config.worker_mode == "thread":
            self.worker = Worker(worker_dir, slots=self.config.slots, max_suspended=self.config.max_suspended,
                                 heartbeat_ms=self.config.heartbeat_ms, coordinator=self.server.address,
                                 worker_id="worker-0", event_log=str(self.workdir / "worker-events.jsonl"))
            self.worker.start()
        else:
            self.worker_proc = subprocess.Popen([
                sys.executable, "-m", "taskpreempt.worker", "--coordinator", self.server.address,
                "--slots", str(self.config.slots), "--max-suspended", str(self.config.max_suspended),
                "--heartbeat-ms", str(self.config.heartbeat_ms), "--workdir", str(worker_dir),
                "--worker-id", "worker-0", "--event-log", str(self.workdir / "worker-events.jsonl"),
            ], stdout=subprocess.DEVNULL, stderr=open(self.workdir / "worker.stderr", "wb"))
        deadline = time.monotonic() + 30
        while "worker-0" not in self.coordinator.workers:
            if time.monotonic() > deadline:
                raise RuntimeError("worker did not register")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc) -> None:
        if self.worker is not None:
            self.worker.stop()
        if self.worker_proc is not None:
            self.worker_proc.terminate()
            try:
                self.worker_proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self.worker_proc.kill()
        self.server.stop()
        self.coordinator.close()


def run_once(config: HarnessConfig, primitive: str, r: float, run_index: int, workdir: Path,
             inputs: tuple[Path, Path], work_factor: int):
    low = make_descriptor("t_l", inputs[0], config.low, config, work_factor, config.seed)
    high = make_descriptor("t_h", inputs[1], config.high, config, work_factor, config.seed + 1)
    spec = ExperimentSpec(low=low, rule=TriggerRule(r, ACTIONS[primitive], high), timeout_s=config.timeout_s)
    with Cluster(config, workdir) as cluster:
        outcome = run_schedule(cluster.coordinator, spec)
    return RunMetrics.from_outcome(outcome, primitive, run_index), outcome


def _failed_row(primitive: str, r: float, run_index: int, why: str) -> dict:
    row = {c: "" for c in CSV_COLUMNS}
    row.update(kind="run", primitive=primitive, r=r, run_index=run_index, status=f"failed: {why}")
    return row


class CsvSink:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        self._writer.writeheader()

    def write(self, row: dict) -> None:
        self._writer.writerow({c: row.get(c, "") for c in CSV_COLUMNS})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_repetition(config: HarnessConfig, primitive: str, r: float, rep: int, scratch: Path,
                   inputs, work_factor: int, sink: Optional[CsvSink] = None):
    """One repetition, retried up to ``config.max_retries`` times; returns (metrics, outcome) or (None, None)."""
    for attempt in range(config.max_retries + 1):
        workdir = Path(tempfile.mkdtemp(prefix=f"{primitive}-r{r:.2f}-{rep}-", dir=scratch))
        try:
            metrics, outcome = run_once(config, primitive, r, rep, workdir, inputs, work_factor)
        except (SchedulerError, RuntimeError, OSError, ValueError) as exc:
            log.warning("%s r=%.2f rep %d attempt %d failed: %s", primitive, r, rep, attempt, exc)
            if attempt == config.max_retries and sink:
                sink.write(_failed_row(primitive, r, rep, str(exc)))
            continue
        finally:
            shutil.rmtree(workdir, ignore_errors=True)
        if sink:
            sink.write({"kind": "run", **metrics.as_row()})
        log.info("%s r=%.2f rep %d: sojourn %.0f ms, makespan %.0f ms", primitive, r, rep,
                 metrics.sojourn_high_ms, metrics.makespan_ms)
        return metrics, outcome
    return None, None


def run_cell(config: HarnessConfig, primitive: str, r: float, reps: int, scratch: Path,
             inputs, work_factor: int, sink: Optional[CsvSink] = None):
    """All repetitions of one (primitive, r) point, back to back."""
    runs, outcomes = [], []
    for rep in range(reps):
        metrics, outcome = run_repetition(config, primitive, r, rep, scratch, inputs, work_factor, sink)
        if metrics is not None:
            runs.append(metrics)
            outcomes.append(outcome)
    agg = aggregate(runs) if runs else None
    if sink and agg:
        sink.write({"kind": "aggregate", **agg.as_row()})
    return runs, agg, outcomes


@dataclass
class CellResult:
    runs: list
    aggregate: Optional[AggregateMetrics]
    outcomes: list
    wall_s: float


def run_experiment_matrix(config: HarnessConfig, out_dir, reps: Optional[int] = None,
                          r_grid: Optional[Iterable[float]] = None, data_dir=None):
    """Every (primitive, r, repetition) on a fresh coordinator/worker pair.

    Writes ``runs.csv`` (run rows as they finish, then one aggregate row per cell),
    the resolved config and an environment record into ``out_dir``.
    Returns ``{(primitive, r): CellResult}``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reps = reps or config.repetitions
    r_grid = list(r_grid) if r_grid is not None else list(config.r_grid)
    data_dir = Path(data_dir) if data_dir else out_dir / "data"
    work_factor = resolve_work_factor(config)
    inputs = (
        ensure_input(data_dir, config.low.input_bytes, config.tuple_bytes, config.seed),
        ensure_input(data_dir, config.high.input_bytes, config.tuple_bytes, config.seed + 1),
    )
    with open(out_dir / "config.yaml", "w") as fh:
        yaml.safe_dump({**config.to_dict(), "work_factor": work_factor, "repetitions": reps, "r_grid": r_grid}, fh)
    with open(out_dir / "environment.json", "w") as fh:
        json.dump(probe_environment().as_dict(), fh, indent=2)

    scratch = Path(tempfile.mkdtemp(prefix="runs-", dir=out_dir))
    sink = CsvSink(out_dir / "runs.csv")
    cells = {(p, r): CellResult([], None, [], 0.0) for p in config.primitives for r in r_grid}
    try:
        # repetition-major order with the primitive order rotated each time, so the runs
        # being compared sit next to each other in time and slow drift in machine speed
        # hits all primitives alike
        for rep in range(reps):
            shift = rep % len(config.primitives)
            order = config.primitives[shift:] + config.primitives[:shift]
            for r in r_grid:
                for primitive in order:
                    cell = cells[(primitive, r)]
                    start = time.monotonic()
                    metrics, outcome = run_repetition(config, primitive, r, rep, scratch, inputs, work_factor, sink)
                    cell.wall_s += time.monotonic() - start
                    if metrics is not None:
                        cell.runs.append(metrics)
                        cell.outcomes.append(outcome)
        for cell in cells.values():
            if cell.runs:
                cell.aggregate = aggregate(cell.runs)
                sink.write({"kind": "aggregate", **cell.aggregate.as_row()})
    finally:
        sink.close()
        shutil.rmtree(scratch, ignore_errors=True)
    return cells
