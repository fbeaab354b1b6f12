#!/usr/bin/env python3
"""Print the work factor for a target task length and time one real task with it."""
import argparse
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from taskpreempt.synthetic_task import calibrate_work_factor, generate_input


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seconds", type=float, default=15.0)
    p.add_argument("--input-mib", type=int, default=64)
    p.add_argument("--tuple-bytes", type=int, default=1024)
    args = p.parse_args()
    total = args.input_mib << 20
    wf = calibrate_work_factor(args.seconds, total // args.tuple_bytes, args.tuple_bytes)
    print(f"work factor {wf}")
    with tempfile.TemporaryDirectory() as tmp:
        path = generate_input(Path(tmp) / "in.dat", total, args.tuple_bytes, seed=0)
        start = time.monotonic()
        subprocess.run([sys.executable, "-m", "taskpreempt.synthetic_task", "--input", str(path),
                        "--tuple-bytes", str(args.tuple_bytes), "--work-factor", str(wf)],
                       stdout=subprocess.DEVNULL, check=True)
        print(f"standalone run: {time.monotonic() - start:.2f}s (target {args.seconds:.1f}s)")


if __name__ == "__main__":
    main()
