"""Synthetic mapper: parses a generated input file and optionally holds a dirtied ballast.

Stdout protocol, one record per line::

    PROGRESS <fraction>
    RESUMED
    SUMMARY tuples=<n> checksum=<ok|fail>

Exit codes: 0 success, 2 input parse failure, 3 ballast checksum mismatch,
4 missing input.
"""
from __future__ import annotations

import argparse
import os
import random
import signal
import sys
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

HEADER_BYTES = 24  # 16 hex digits of tuple index + 8 hex digits of payload crc32
MIN_TUPLE_BYTES = HEADER_BYTES + 8
BALLAST_CHUNK = 8 << 20

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_CHECKSUM = 3
EXIT_NO_INPUT = 4


@dataclass
class TaskConfig:
    input_path: str
    ballast_bytes: int = 0
    progress_interval: int = 100
    tuple_bytes: int = 1024
    verify_ballast: bool = False
    work_factor: int = 1
    output_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.ballast_bytes < 0:
            raise ValueError("ballast_bytes must be non-negative")
        if self.tuple_bytes < MIN_TUPLE_BYTES:
            raise ValueError(f"tuple_bytes must be at least {MIN_TUPLE_BYTES}")
        if self.progress_interval <= 0:
            raise ValueError("progress_interval must be positive")
        if self.work_factor < 0:
            raise ValueError("work_factor must be non-negative")


def generate_input(path, total_bytes: int, tuple_bytes: int, seed: int) -> Path:
    """Write a deterministic file of fixed-width tuples.

    Each tuple is ``<index:016x><crc32(payload):08x><payload>\\n``. The file is
    written to a sibling temp name and renamed into place, so a failure (for
    example a full disk) never leaves a partial file behind.
    """
    if tuple_bytes < MIN_TUPLE_BYTES:
        raise ValueError(f"tuple_bytes must be at least {MIN_TUPLE_BYTES}")
    if total_bytes <= 0 or total_bytes % tuple_bytes:
        raise ValueError(f"total_bytes={total_bytes} is not a positive multiple of tuple_bytes={tuple_bytes}")
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    rng = random.Random(seed)
    payload_len = tuple_bytes - HEADER_BYTES - 1
    n = total_bytes // tuple_bytes
    try:
        with open(tmp, "wb") as fh:
            batch = []
            for i in range(n):
                payload = rng.randbytes(payload_len)
                batch.append(b"%016x%08x" % (i, zlib.crc32(payload)) + payload + b"\n")
                if len(batch) == 4096:
                    fh.write(b"".join(batch))
                    batch.clear()
            fh.write(b"".join(batch))
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


class ParseError(Exception):
    pass


def parse_tuple(record: bytes, expected_index: int, tuple_bytes: int) -> bytes:
    if len(record) != tuple_bytes or record[-1:] != b"\n":
        raise ParseError(f"tuple {expected_index}: bad framing")
    try:
        index = int(record[:16], 16)
        crc = int(record[16:HEADER_BYTES], 16)
    except ValueError:
        raise ParseError(f"tuple {expected_index}: unparseable header") from None
    payload = record[HEADER_BYTES:-1]
    if index != expected_index:
        raise ParseError(f"tuple {expected_index}: found index {index}")
    if zlib.crc32(payload) != crc:
        raise ParseError(f"tuple {expected_index}: payload crc mismatch")
    return payload


def tuple_work(payload: bytes, work_factor: int, seed: int = 0) -> int:
    """Fixed per-tuple CPU cost: a chained crc32 over the payload."""
    h = seed
    for _ in range(work_factor):
        h = zlib.crc32(payload, h)
    return h


def calibrate_work_factor(target_seconds: float, n_tuples: int, tuple_bytes: int, probe_tuples: int = 2000,
                          repeats: int = 5) -> int:
    """Pick the work factor that makes ``n_tuples`` take about ``target_seconds``.

    Each probe is timed ``repeats`` times and the fastest kept, so a burst of
    background load during calibration does not shrink the factor.
    """
    payload = random.Random(0).randbytes(tuple_bytes - HEADER_BYTES - 1)
    record = b"%016x%08x" % (0, zlib.crc32(payload)) + payload + b"\n"

    def per_tuple(wf):
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(probe_tuples):
                tuple_work(parse_tuple(record, 0, tuple_bytes), wf)
            best = min(best, time.perf_counter() - t0)
        return best / probe_tuples

    base = per_tuple(0)
    per_unit = (per_tuple(128) - base) / 128
    budget = target_seconds / n_tuples - base
    return max(1, round(budget / per_unit)) if per_unit > 0 else 1


class _Channel:
    """Progress channel on fd 1; raw writes so a signal handler can never hit a half-written buffer."""

    def __init__(self, fd: int = 1):
        self.fd = fd

    def emit(self, line: str) -> None:
        data = (line + "\n").encode()
        while data:
            n = os.write(self.fd, data)
            data = data[n:]

    def flush(self) -> None:
        try:
            sys.stdout.flush()
        except (RuntimeError, ValueError, OSError):
            pass


def _install_handlers(channel: _Channel) -> None:
    def on_tstp(signum, frame):
        channel.flush()
        # default stop; SIGSTOP cannot be discarded even if our process group is orphaned
        os.kill(os.getpid(), signal.SIGSTOP)

    def on_cont(signum, frame):
        channel.emit("RESUMED")

    signal.signal(signal.SIGTSTP, on_tstp)
    signal.signal(signal.SIGCONT, on_cont)


def _fill_ballast(size: int, seed: int):
    import numpy as np

    ballast = bytearray(size)
    view = memoryview(ballast)
    rng = np.random.default_rng(seed)
    crc = 0
    for off in range(0, size, BALLAST_CHUNK):
        chunk = rng.bytes(min(BALLAST_CHUNK, size - off))
        view[off:off + len(chunk)] = chunk
        crc = zlib.crc32(chunk, crc)
    return ballast, crc


def _ballast_crc(ballast: bytearray) -> int:
    view = memoryview(ballast)
    crc = 0
    for off in range(0, len(ballast), BALLAST_CHUNK):
        crc = zlib.crc32(view[off:off + BALLAST_CHUNK], crc)
    return crc


def run_task(config: TaskConfig, channel: Optional[_Channel] = None, install_signals: bool = True) -> int:
    channel = channel or _Channel()
    if install_signals:
        _install_handlers(channel)

    path = Path(config.input_path)
    if not path.is_file():
        print(f"synthetic-task: no input file {path}", file=sys.stderr)
        return EXIT_NO_INPUT
    size = path.stat().st_size
    if size == 0 or size % config.tuple_bytes:
        print(f"synthetic-task: input size {size} is not a multiple of {config.tuple_bytes}", file=sys.stderr)
        return EXIT_PARSE
    total = size // config.tuple_bytes

    ballast, ballast_crc = (None, 0)
    if config.ballast_bytes:
        ballast, ballast_crc = _fill_ballast(config.ballast_bytes, config.seed)

    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    done = 0
    chunk_digest = 0
    chunk_no = 0
    interval = config.progress_interval
    try:
        with open(path, "rb", buffering=0) as fh:
            while done < total:
                want = min(interval, total - done)
                block = fh.read(want * config.tuple_bytes)
                if len(block) != want * config.tuple_bytes:
                    raise ParseError("input shrank while reading")
                for j in range(want):
                    rec = block[j * config.tuple_bytes:(j + 1) * config.tuple_bytes]
                    payload = parse_tuple(rec, done, config.tuple_bytes)
                    chunk_digest = tuple_work(payload, config.work_factor, chunk_digest)
                    done += 1
                if out_dir is not None:
                    (out_dir / f"chunk-{chunk_no:06d}.out").write_text(f"{done} {chunk_digest:08x}\n")
                chunk_no += 1
                channel.emit(f"PROGRESS {done / total!r}")
    except ParseError as exc:
        print(f"synthetic-task: {exc}", file=sys.stderr)
        return EXIT_PARSE

    ok = True
    if ballast is not None and config.verify_ballast:
        ok = _ballast_crc(ballast) == ballast_crc
    channel.emit(f"SUMMARY tuples={done} checksum={'ok' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_CHECKSUM


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synthetic-task", description=__doc__.splitlines()[0])
    p.add_argument("--input", required=True)
    p.add_argument("--ballast-bytes", type=int, default=0)
    p.add_argument("--progress-interval", type=int, default=100, help="tuples per progress record")
    p.add_argument("--tuple-bytes", type=int, default=1024)
    p.add_argument("--verify-ballast", action="store_true")
    p.add_argument("--work-factor", type=int, default=1, help="crc32 rounds per tuple")
    p.add_argument("--output-dir", default=None, help="temporary per-chunk outputs go here")
    p.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = TaskConfig(
        input_path=args.input,
        ballast_bytes=args.ballast_bytes,
        progress_interval=args.progress_interval,
        tuple_bytes=args.tuple_bytes,
        verify_ballast=args.verify_ballast,
        work_factor=args.work_factor,
        output_dir=args.output_dir,
        seed=args.seed,
    )
    return run_task(config)


if __name__ == "__main__":
    sys.exit(main())
