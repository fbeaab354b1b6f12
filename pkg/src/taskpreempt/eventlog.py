"""One-JSON-object-per-line transition log shared by coordinator and worker."""
from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Optional


def now_ms() -> float:
    return time.monotonic_ns() / 1e6


class EventLog:
    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", buffering=1) if self.path else None

    def record(self, task_id: str, old_state, event, new_state, **extra) -> dict:
        entry = {
            "timestamp": now_ms(),
            "task_id": task_id,
            "old_state": getattr(old_state, "value", old_state),
            "event": getattr(event, "value", event),
            "new_state": getattr(new_state, "value", new_state),
        }
        entry.update(extra)
        with self._lock:
            self.entries.append(entry)
            if self._fh:
                self._fh.write(json.dumps(entry) + "\n")
        return entry

    def close(self) -> None:
        with self._lock:
            if self._fh:
                self._fh.close()
                self._fh = None


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
