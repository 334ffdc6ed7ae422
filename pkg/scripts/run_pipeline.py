#!/usr/bin/env python3
"""Run the full pipeline on a freshly emitted synthetic scene.

Wraps the CLI stages (synth -> partition -> bootstrap -> fuse -> eval) with one
shared output directory, so a complete reconstruction is a single command:

    python3 scripts/run_pipeline.py --out /tmp/run --seed 7 --oracle-warp 2.0
"""

from __future__ import annotations

import argparse
import subprocess
import sys
import time
from pathlib import Path


def sh(*argv):
    print("+", " ".join(str(a) for a in argv), flush=True)
    t0 = time.time()
    proc = subprocess.run([sys.executable, "-m", "layersplat",
                           *map(str, argv)])
    print(f"  [{time.time() - t0:.1f}s]", flush=True)
    if proc.returncode != 0:
        sys.exit(proc.returncode)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--views", type=int, default=4)
    ap.add_argument("--holdouts", type=int, default=8)
    ap.add_argument("--noise", type=float, default=0.02)
    ap.add_argument("--bootstrap-iters", type=int, default=2000)
    ap.add_argument("--unknown", type=int, default=60)
    ap.add_argument("--pprime", type=int, default=8)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--final-iters", type=int, default=2000)
    ap.add_argument("--oracle-warp", type=float, default=0.0)
    ap.add_argument("--oracle-jitter", type=float, default=0.0)
    ap.add_argument("--skip-fusion", action="store_true",
                    help="train on inputs only (baseline)")
    args = ap.parse_args()

    out = Path(args.out)
    sh("synth", "--out", out / "data", "--views", args.views,
       "--holdouts", args.holdouts, "--noise", args.noise, "--seed", 0)
    sh("partition", "--manifest", out / "data" / "manifest.json",
       "--mode", "sphere", "--out", out / "part")
    sh("bootstrap", "--manifest", out / "data" / "manifest.json",
       "--partition", out / "part", "--iters", args.bootstrap_iters,
       "--out", out / "boot", "--seed", args.seed)
    sh("fuse", "--manifest", out / "data" / "manifest.json",
       "--partition", out / "part",
       "--bootstrap-checkpoint", out / "boot" / "front.lsp",
       "--generator", "oracle",
       "--unknown", 0 if args.skip_fusion else args.unknown,
       "--pprime", args.pprime, "--steps", args.steps,
       "--final-iters", args.final_iters,
       "--oracle-warp", args.oracle_warp,
       "--oracle-jitter", args.oracle_jitter,
       "--out", out / "fuse", "--seed", args.seed)
    sh("eval", "--run", out / "fuse", "--gt", out / "data" / "manifest.json")


if __name__ == "__main__":
    main()
