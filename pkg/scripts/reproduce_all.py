#!/usr/bin/env python3
"""Run every config in configs/ and write manifests and CSV tables under results/.

Usage: python scripts/reproduce_all.py [--workers N] [--output-dir results]
"""
import argparse
import sys
import time
from pathlib import Path

from latticeheat.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--output-dir", default=str(ROOT / "results"))
    args = p.parse_args()
    argv = ["reproduce-all", "--configs-dir", str(ROOT / "configs"), "--output-dir", args.output_dir]
    if args.workers is not None:
        argv += ["--workers", str(args.workers)]
    t0 = time.perf_counter()
    code = main(argv)
    print(f"total {time.perf_counter() - t0:.1f} s")
    sys.exit(code)
