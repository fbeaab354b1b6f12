"""What the host offers for swap experiments. Read-only: never changes system settings."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional


class EnvironmentUnsupported(RuntimeError):
    pass


def _meminfo() -> dict:
    out = {}
    try:
        for line in Path("/proc/meminfo").read_text().splitlines():
            key, _, rest = line.partition(":")
            out[key] = int(rest.split()[0]) * 1024
    except (OSError, ValueError, IndexError):
        pass
    return out


def _read_int(path) -> Optional[int]:
    try:
        text = Path(path).read_text().strip()
    except OSError:
        return None
    return int(text) if text.isdigit() else None


def _cgroup_memory_max() -> Optional[int]:
    # cgroup v2 first, then v1
    try:
        rel = next(line.split(":", 2)[2] for line in Path("/proc/self/cgroup").read_text().splitlines()
                   if line.startswith("0::"))
        value = _read_int(Path("/sys/fs/cgroup") / rel.lstrip("/") / "memory.max")
        if value is not None:
            return value
    except (OSError, StopIteration):
        pass
    value = _read_int("/sys/fs/cgroup/memory.max")
    if value is None:
        value = _read_int("/sys/fs/cgroup/memory/memory.limit_in_bytes")
    return value if value is not None and value < (1 << 60) else None


@dataclass
class Environment:
    per_process_swap: bool
    swap_total_bytes: int
    mem_total_bytes: int
    mem_available_bytes: int
    cgroup_memory_max: Optional[int]
    swappiness: Optional[int]
    cpu_count: int

    @property
    def memory_limit_bytes(self) -> int:
        limits = [self.mem_total_bytes] + ([self.cgroup_memory_max] if self.cgroup_memory_max else [])
        return min(limits)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["memory_limit_bytes"] = self.memory_limit_bytes
        return d


def probe_environment() -> Environment:
    info = _meminfo()
    try:
        status = Path("/proc/self/status").read_text()
        per_process = "VmSwap:" in status
    except OSError:
        per_process = False
    return Environment(
        per_process_swap=per_process,
        swap_total_bytes=info.get("SwapTotal", 0),
        mem_total_bytes=info.get("MemTotal", 0),
        mem_available_bytes=info.get("MemAvailable", 0),
        cgroup_memory_max=_cgroup_memory_max(),
        swappiness=_read_int("/proc/sys/vm/swappiness"),
        cpu_count=os.cpu_count() or 1,
    )


def require_swap_environment(env: Environment, combined_ballast_bytes: int,
                             require_swappiness: Optional[int] = None) -> None:
    """Raise EnvironmentUnsupported unless a swap sweep can produce paging at all."""
    if not env.per_process_swap:
        raise EnvironmentUnsupported("no per-process swap accounting (VmSwap) on this platform")
    if env.swap_total_bytes <= 0:
        raise EnvironmentUnsupported("no swap space configured")
    if combined_ballast_bytes <= env.memory_limit_bytes:
        raise EnvironmentUnsupported(
            f"combined ballast {combined_ballast_bytes} B fits in the memory limit {env.memory_limit_bytes} B; "
            "run under a memory cap (small VM or cgroup memory.max) so the tasks must page")
    if require_swappiness is not None and env.swappiness != require_swappiness:
        raise EnvironmentUnsupported(
            f"vm.swappiness is {env.swappiness}, config requires {require_swappiness}; "
            "set it yourself (sysctl vm.swappiness=...) - the harness does not change it")
