#!/usr/bin/env python3
"""Desk-scale pipeline: generate the corpus, train, evaluate on the test split.

    python scripts/desk_run.py OUT_DIR [--set key=value ...]

Leaves OUT_DIR/{corpus,run,eval} and prints the metric table.
"""

import argparse
import sys
import time
from pathlib import Path

from wsgic.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args(argv)
    out = Path(args.out)
    sets = [a for kv in args.set for a in ("--set", kv)]
    force = ["--force"] if args.force else []
    steps = [
        ["gen-data", "--out", str(out / "corpus"), *sets, *force],
        ["train", "--corpus", str(out / "corpus"), "--out", str(out / "run"), *sets, *force],
        ["eval", "--corpus", str(out / "corpus"), "--checkpoint", str(out / "run"), "--out", str(out / "eval"), *sets, *force],
    ]
    for step in steps:
        t0 = time.perf_counter()
        code = main(step)
        print(f"[{step[0]}] exit {code} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
