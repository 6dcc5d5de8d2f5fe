#!/usr/bin/env python3
"""Grounding-module ablations on the desk corpus with a shared seed.

    python scripts/ablation.py OUT_DIR [--axes use_rgm,use_cls+use_rel] [--set key=value ...]

Generates the corpus if OUT_DIR/corpus is missing, then runs ``wsgic ablate``.
"""

import argparse
import sys
from pathlib import Path

from wsgic.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--axes", default="use_rgm,use_cls+use_rel")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    out = Path(args.out)
    sets = [a for kv in args.set for a in ("--set", kv)]
    corpus = out / "corpus"
    if not (corpus / "manifest.jsonl").exists():
        code = main(["gen-data", "--out", str(corpus), "--force", *sets])
        if code:
            return code
    return main(["ablate", "--corpus", str(corpus), "--out", str(out / "ablation"), "--axes", args.axes, "--force", *sets])


if __name__ == "__main__":
    sys.exit(run())
