#!/usr/bin/env python3
"""Calibrate the end-to-end regression thresholds.

Runs the reference configuration three times — fused with a moderately
inconsistent oracle, the no-fusion baseline, and fused with a
zero-inconsistency oracle — and prints the held-out PSNR of each, the
fused-vs-baseline margin, and wall-clock times. The printed numbers are meant
to be frozen into the regression test once, then left alone.
"""

from __future__ import annotations

import argparse
import subprocess
import sys
import time
from pathlib import Path


def run(label, out, extra):
    t0 = time.time()
    argv = [sys.executable, "scripts/run_pipeline.py", "--out", str(out),
            *map(str, extra)]
    print(f"== {label}: {' '.join(argv[2:])}", flush=True)
    proc = subprocess.run(argv)
    if proc.returncode != 0:
        sys.exit(proc.returncode)
    return time.time() - t0


def psnr_of(out):
    text = (Path(out) / "fuse" / "eval" / "summary.txt").read_text()
    for line in text.splitlines():
        if line.startswith("psnr_mean"):
            return float(line.split()[-1])
    raise SystemExit(f"no psnr_mean in {out}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default="/tmp/layersplat_calib")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--oracle-warp", type=float, default=2.0)
    ap.add_argument("--oracle-jitter", type=float, default=0.1)
    args = ap.parse_args()
    root = Path(args.root)

    t_fused = run("fused (moderate inconsistency)", root / "fused",
                  ["--seed", args.seed, "--oracle-warp", args.oracle_warp,
                   "--oracle-jitter", args.oracle_jitter])
    t_base = run("baseline (no fusion)", root / "baseline",
                 ["--seed", args.seed, "--skip-fusion"])
    t_zero = run("fused (zero inconsistency)", root / "zero",
                 ["--seed", args.seed])

    p_fused = psnr_of(root / "fused")
    p_base = psnr_of(root / "baseline")
    p_zero = psnr_of(root / "zero")
    print()
    print(f"fused PSNR     : {p_fused:7.3f} dB   [{t_fused:6.1f}s]")
    print(f"baseline PSNR  : {p_base:7.3f} dB   [{t_base:6.1f}s]")
    print(f"zero-inc PSNR  : {p_zero:7.3f} dB   [{t_zero:6.1f}s]")
    print(f"fusion margin  : {p_fused - p_base:+7.3f} dB (regression bound: >= +1.0)")
    print(f"zero-inc bound : {p_zero:7.3f} dB (regression bound: >= 28.0)")


if __name__ == "__main__":
    main()
