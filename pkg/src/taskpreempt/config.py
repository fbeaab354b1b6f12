"""Experiment configuration (YAML on disk; schema in docs/config_schema.md)."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

MiB = 1 << 20

PRIMITIVES = ("wait", "kill", "suspend_resume")


@dataclass
class TaskSize:
    input_bytes: int = 64 * MiB
    ballast_bytes: int = 0
    verify_ballast: bool = False


@dataclass
class SweepConfig:
    r: float = 0.5
    low_ballast_bytes: int = 640 * MiB
    high_ballast_bytes: list = field(default_factory=lambda: [0, 128 * MiB, 256 * MiB, 384 * MiB, 512 * MiB])
    repetitions: int = 3
    drop_caches: bool = False
    # refuse to run unless vm.swappiness has this value; None only records it
    require_swappiness: Optional[int] = None


@dataclass
class HarnessConfig:
    name: str = "desk"
    primitives: list = field(default_factory=lambda: list(PRIMITIVES))
    r_grid: list = field(default_factory=lambda: [0.1 * i for i in range(1, 10)])
    repetitions: int = 3
    heartbeat_ms: float = 50.0
    slots: int = 1
    max_suspended: int = 1
    tuple_bytes: int = 1024
    progress_interval: int = 1024
    work_factor: Union[int, str] = "auto"
    target_task_seconds: float = 15.0
    low: TaskSize = field(default_factory=TaskSize)
    high: TaskSize = field(default_factory=TaskSize)
    max_retries: int = 2
    seed: int = 7
    timeout_s: float = 900.0
    worker_mode: str = "thread"  # or "process"
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        unknown = set(self.primitives) - set(PRIMITIVES)
        if unknown:
            raise ValueError(f"unknown primitives {sorted(unknown)}")
        if any(not 0.0 < r < 1.0 for r in self.r_grid):
            raise ValueError("r_grid values must lie in (0, 1)")
        for size in (self.low, self.high):
            if size.input_bytes % self.tuple_bytes:
                raise ValueError("input_bytes must be a multiple of tuple_bytes")
        if self.worker_mode not in ("thread", "process"):
            raise ValueError("worker_mode must be 'thread' or 'process'")

    @classmethod
    def from_dict(cls, raw: dict) -> "HarnessConfig":
        raw = dict(raw or {})
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        for key in ("low", "high"):
            if key in raw:
                raw[key] = TaskSize(**raw[key])
        if "sweep" in raw:
            raw["sweep"] = SweepConfig(**raw["sweep"])
        return cls(**raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "HarnessConfig":
        return dataclasses.replace(self, **changes)


# scale presets applied by `harness run --desk-scale/--paper-scale`
SCALES = {
    "desk": {"low": {"input_bytes": 64 * MiB}, "high": {"input_bytes": 64 * MiB}, "repetitions": 3,
             "target_task_seconds": 15.0},
    # 512 MB single-block inputs, 20 repetitions; per-tuple work stays at desk calibration
    "paper": {"low": {"input_bytes": 512 * MiB}, "high": {"input_bytes": 512 * MiB}, "repetitions": 20,
              "target_task_seconds": 120.0},
}


def apply_scale(config: HarnessConfig, scale: str) -> HarnessConfig:
    preset = SCALES[scale]
    low = dataclasses.replace(config.low, **preset["low"])
    high = dataclasses.replace(config.high, **preset["high"])
    return config.replace(low=low, high=high, repetitions=preset["repetitions"],
                          target_task_seconds=preset["target_task_seconds"], name=f"{config.name}-{scale}")


def load_config(path) -> HarnessConfig:
    with open(Path(path)) as fh:
        return HarnessConfig.from_dict(yaml.safe_load(fh))
