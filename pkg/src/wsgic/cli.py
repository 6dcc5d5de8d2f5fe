"""Command-line entry point: gen-data, train, eval, ground, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Every command writes its fully resolved configuration to ``config.txt`` in its
output directory.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config
from .errors import MissingCheckpointError, WsgicError
from .evaluation import evaluate, evaluate_oracle
from .imageio import encode_ppm, read_ppm
from .model import GroundedCaptioner, ground_caption
from .synthcorpus import Vocabulary, generate_corpus, read_corpus, write_corpus
from .training import format_ablation_table, parse_axes, run_ablation_matrix, train

log = logging.getLogger("wsgic")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MAX_REJECT_FRACTION = 0.01
BOX_COLOUR = (255, 0, 0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ helpers
def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
        overrides["corpus_seed"] = str(args.seed)
    if getattr(args, "rho", None) is not None:
        overrides["rho"] = str(args.rho)
    return load_config(args.config, overrides)


def _prepare_out(path: str, force: bool, allow_existing: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise UsageError(f"output directory {out} is not empty (use --force)")
    if out.exists() and force:
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, run: RunConfig) -> None:
    (out / "config.txt").write_text(dump_config(run))


def _model_config(run: RunConfig, vocab_size: int, num_relations: int):
    cfg = copy.deepcopy(run.train.model)
    cfg.decoder.vocab_size = vocab_size
    cfg.encoder.num_relations = num_relations
    return cfg


def _checkpoint_file(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "best.vlam"
    if not p.is_file():
        raise MissingCheckpointError(f"no checkpoint at {p}")
    return p


def _load_model(run: RunConfig, ckpt: Path, vocab_size: int, num_relations: int) -> GroundedCaptioner:
    model = GroundedCaptioner(_model_config(run, vocab_size, num_relations))
    model.load(ckpt)
    return model


def _default_config_for(args) -> None:
    # a run directory carries its own config; use it unless one was given
    if args.config is None and getattr(args, "checkpoint", None):
        p = Path(args.checkpoint)
        cand = (p if p.is_dir() else p.parent) / "config.txt"
        if cand.is_file():
            args.config = str(cand)


def _burn_box(image: np.ndarray, box, colour=BOX_COLOUR) -> np.ndarray:
    img = image.copy()
    img[box.y1, box.x1 : box.x2 + 1] = colour
    img[box.y2, box.x1 : box.x2 + 1] = colour
    img[box.y1 : box.y2 + 1, box.x1] = colour
    img[box.y1 : box.y2 + 1, box.x2] = colour
    return img


# ------------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    run = _resolve(args)
    out = _prepare_out(args.out, args.force)
    corpus = generate_corpus(run.corpus)
    total = run.corpus.n_train + run.corpus.n_val + run.corpus.n_test
    digest = write_corpus(corpus, out, run.corpus.scene.relations)
    _echo_config(out, run)
    sizes = {k: len(v) for k, v in corpus.samples.items()}
    print(f"corpus {digest} train={sizes['train']} val={sizes['val']} test={sizes['test']} rejects={corpus.rejects}")
    if corpus.rejects > MAX_REJECT_FRACTION * total:
        print(f"infeasible placements: {corpus.rejects} of {total} scenes rejected", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args) -> int:
    run = _resolve(args)
    corpus = read_corpus(args.corpus)
    out = _prepare_out(args.out, args.force, allow_existing=args.resume)
    _echo_config(out, run)
    for name in ("vocab.txt", "relation_classes.txt", "corpus_hash.txt"):
        src = Path(args.corpus) / name
        if src.exists():
            shutil.copyfile(src, out / name)
    result = train(run.train, corpus, out, resume=args.resume)
    print(f"best epoch {result.best_epoch} val {result.best_val:.6f}")
    return EXIT_OK


def _write_eval(out: Path, output) -> None:
    (out / "metrics.txt").write_text(output.report.to_table())
    (out / "metrics.json").write_text(json.dumps(output.report.as_dict(), sort_keys=True, indent=1) + "\n")
    lines = output.result_lines()
    (out / "results.jsonl").write_text("".join(line + "\n" for line in lines))


def cmd_eval(args) -> int:
    if not args.oracle and not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --oracle)")
    _default_config_for(args)
    run = _resolve(args)
    corpus = read_corpus(args.corpus)
    samples = corpus.split(args.split)
    if args.oracle:
        output = evaluate_oracle(samples)
    else:
        ckpt = _checkpoint_file(args.checkpoint)
        model = _load_model(run, ckpt, len(corpus.vocab), len(corpus.relations))
        output = evaluate(model, samples, corpus.vocab, run.groundable, run.rho)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, run)
    _write_eval(out, output)
    print(output.report.to_table(), end="")
    return EXIT_OK


def cmd_ground(args) -> int:
    _default_config_for(args)
    run = _resolve(args)
    ckpt = _checkpoint_file(args.checkpoint)
    vocab_path = Path(args.vocab) if args.vocab else ckpt.parent / "vocab.txt"
    if not vocab_path.is_file():
        raise MissingCheckpointError(f"no vocabulary at {vocab_path} (use --vocab)")
    vocab = Vocabulary.from_text(vocab_path.read_text())
    rel_path = ckpt.parent / "relation_classes.txt"
    n_rel = len(rel_path.read_text().splitlines()) if rel_path.is_file() else run.train.model.encoder.num_relations
    image = read_ppm(args.image)
    model = _load_model(run, ckpt, len(vocab), n_rel)
    enc = model.cfg.encoder
    if image.shape[:2] != (enc.image_height, enc.image_width):
        from .errors import BadDimensionsError

        raise BadDimensionsError(f"image is {image.shape[1]}x{image.shape[0]}, model expects {enc.image_width}x{enc.image_height}")
    dtype = model.encoder.pos.dtype.type
    results, _ = model.decode(image[None].astype(dtype) / dtype(255.0))
    gc = ground_caption(results[0], vocab.itos, set(run.groundable), enc.grid, enc.patch_size, run.rho)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, run)
    (out / "caption.txt").write_text(" ".join(gc.words) + "\n")
    overlay = image.copy()
    records = []
    image_id = Path(args.image).stem
    for g in gc.grounded:
        (out / f"vlam_{g.position:02d}_{g.word}.pgm").write_bytes(g.vlam.to_pgm())
        overlay = _burn_box(overlay, g.box)
        rec = {"box": g.box.as_list(), "image_id": image_id, "position": g.position, "score": round(g.score, 6), "word": g.word}
        records.append(json.dumps(rec, sort_keys=True))
    (out / "results.jsonl").write_text("".join(r + "\n" for r in records))
    (out / "overlay.ppm").write_bytes(encode_ppm(overlay))
    print(" ".join(gc.words))
    for r in records:
        print(r)
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _resolve(args)
    corpus = read_corpus(args.corpus)
    hash_file = Path(args.corpus) / "corpus_hash.txt"
    digest = hash_file.read_text().strip() if hash_file.exists() else corpus.content_hash()
    cells = parse_axes(args.axes or run.ablation_axes)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, run)
    test = corpus.split(args.split)

    def evaluate_fn(model):
        return evaluate(model, test, corpus.vocab, run.groundable, run.rho).report.as_dict()

    rows = run_ablation_matrix(run.train, corpus, cells, evaluate_fn, digest, out)
    table = format_ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.jsonl").write_text("".join(json.dumps(r.__dict__, sort_keys=True) + "\n" for r in rows))
    print(table, end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="sets both the training and corpus seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="wsgic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a captioner on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the state in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="decode, ground and score a split")
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint", help="checkpoint file or training output directory")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--rho", type=float)
    e.add_argument("--oracle", action="store_true", help="score ground-truth captions and boxes")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("ground", parents=[common], help="caption and ground one PPM image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--vocab", help="vocab.txt (defaults to the one next to the checkpoint)")
    r.add_argument("--rho", type=float)
    r.set_defaults(func=cmd_ground)

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate an ablation matrix")
    a.add_argument("--corpus", required=True)
    a.add_argument("--axes", help="e.g. use_rgm,use_cls+use_rel or heads=1|4")
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    a.add_argument("--rho", type=float)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"wsgic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        if isinstance(exc, WsgicError) and not isinstance(exc, ConfigError):
            print(f"wsgic: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"wsgic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WsgicError, OSError) as exc:
        print(f"wsgic: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
