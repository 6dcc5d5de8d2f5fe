"""Losses, the teacher-forced training loop, and the ablation matrix runner."""

from __future__ import annotations

import copy
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics
from .config import TrainConfig
from .errors import LengthMismatchError, NonFiniteLossError, ShapeMismatchError
from .model import GroundedCaptioner
from .numerics import Adam, Tensor, clip_grad_norm, cross_entropy_from_logits, no_grad, sigmoid_bce, stack
from .synthcorpus import BACKGROUND, BOS_ID, EOS_ID, PAD_ID, Corpus, SceneSample, Vocabulary

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ losses
def loss_mlc(logits: Tensor, z) -> Tensor:
    """Sigmoid BCE over relation classes, summed per sample and averaged over the batch."""
    z = np.asarray(z)
    if z.shape != logits.shape:
        raise ShapeMismatchError(f"relation logits {logits.shape} vs labels {z.shape}")
    return sigmoid_bce(logits, z)


def loss_xe(step_logits: Tensor | Sequence[Tensor], gt_tokens) -> Tensor:
    """Mean negative log-likelihood of the target tokens over non-PAD positions.

    ``step_logits`` is (B, T, V) or a length-T list of (B, V); ``gt_tokens`` is (B, T).
    """
    if not isinstance(step_logits, Tensor):
        step_logits = stack(list(step_logits), axis=1)
    gt = np.asarray(gt_tokens)
    if step_logits.shape[:-1] != gt.shape:
        raise LengthMismatchError(f"logits {step_logits.shape} vs targets {gt.shape}")
    return cross_entropy_from_logits(step_logits, gt, ignore_index=PAD_ID)


@dataclass
class LossBreakdown:
    l_xe: float
    l_mlc: float

    @property
    def total(self) -> float:
        return self.l_xe + self.l_mlc


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for the zero-based ``epoch``: lr0 * anneal ** floor(epoch / anneal_every)."""
    return cfg.lr * cfg.anneal ** (epoch // cfg.anneal_every)


# ----------------------------------------------------------------- batching
@dataclass
class Batch:
    images: np.ndarray  # (B, H, W, 3) float
    inputs: np.ndarray  # (B, T) BOS + caption
    targets: np.ndarray  # (B, T) caption + EOS, PAD-filled
    relations: np.ndarray  # (B, N_c) {0,1}


def make_batch(samples: Sequence[SceneSample], vocab: Vocabulary, num_relations: int, dtype=np.float32) -> Batch:
    encoded = [vocab.encode(s.caption) for s in samples]
    T = max(len(e) for e in encoded) + 1
    inputs = np.full((len(samples), T), PAD_ID, dtype=np.int64)
    targets = np.full((len(samples), T), PAD_ID, dtype=np.int64)
    rel = np.zeros((len(samples), num_relations), dtype=dtype)
    for i, (s, ids) in enumerate(zip(samples, encoded)):
        inputs[i, : len(ids) + 1] = [BOS_ID] + ids
        targets[i, : len(ids) + 1] = ids + [EOS_ID]
        rel[i, s.relation_ids] = 1.0
    images = np.stack([s.image for s in samples]).astype(dtype) / dtype(255.0)
    return Batch(images, inputs, targets, rel)


MIRROR_PAIRS = (("left_of", "right_of"),)
CONTENT_CONTRAST = 0.25  # min channel distance from the background that counts as content


def _mirror_maps(vocab: Vocabulary, relations) -> tuple[np.ndarray, np.ndarray]:
    """Token-id and relation-column permutations that a horizontal flip induces."""
    tok = np.arange(len(vocab))
    rel = np.arange(len(relations.words))
    index = relations.index()
    for a, b in MIRROR_PAIRS:
        if a in vocab.stoi and b in vocab.stoi:
            tok[vocab.stoi[a]], tok[vocab.stoi[b]] = vocab.stoi[b], vocab.stoi[a]
        if a in index and b in index:
            rel[index[a]], rel[index[b]] = index[b], index[a]
    return tok, rel


def augment_batch(batch: Batch, rng: np.random.Generator, cell: int, flip: bool, shift: bool, tok_map, rel_map) -> Batch:
    """Random horizontal flips (mirrored relation words swapped) and whole-cell shifts that keep all content on the canvas."""
    images = batch.images.copy()
    inputs, targets, rels = batch.inputs.copy(), batch.targets.copy(), batch.relations.copy()
    B, H, W, _ = images.shape
    for i in range(B):
        if flip and rng.random() < 0.5:
            images[i] = images[i, :, ::-1]
            inputs[i], targets[i] = tok_map[inputs[i]], tok_map[targets[i]]
            rels[i] = rels[i, rel_map]
        if shift:
            content = np.abs(images[i] - BACKGROUND).max(axis=-1) > CONTENT_CONTRAST
            rows, cols = np.nonzero(content.reshape(H // cell, cell, W // cell, cell).any(axis=(1, 3)))
            if rows.size:
                dy = int(rng.integers(-rows.min(), H // cell - rows.max()))
                dx = int(rng.integers(-cols.min(), W // cell - cols.max()))
                images[i] = np.roll(images[i], (dy * cell, dx * cell), axis=(0, 1))
    return Batch(images, inputs, targets, rels)


def forward_losses(model: GroundedCaptioner, batch: Batch) -> tuple[Tensor, Tensor | None]:
    enc, ctx = model.encode(batch.images)
    outputs = model.decoder.teacher_forced(ctx, batch.inputs)
    xe = loss_xe([o.logits for o in outputs], batch.targets)
    mlc = loss_mlc(enc.rel_logits, batch.relations) if enc.rel_logits is not None else None
    return xe, mlc


# ------------------------------------------------------------------ training
@dataclass
class EpochRecord:
    epoch: int
    l_xe: float
    l_mlc: float
    total: float
    val_total: float
    lr: float
    wall: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class TrainResult:
    model: GroundedCaptioner
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def validation_loss(model: GroundedCaptioner, samples: Sequence[SceneSample], vocab: Vocabulary, batch_size: int = 100) -> LossBreakdown:
    xe_sum = mlc_sum = 0.0
    n = 0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = make_batch(chunk, vocab, model.cfg.encoder.num_relations, model.encoder.pos.dtype.type)
            xe, mlc = forward_losses(model, batch)
            xe_sum += float(xe.data) * len(chunk)
            mlc_sum += (float(mlc.data) if mlc is not None else 0.0) * len(chunk)
            n += len(chunk)
    return LossBreakdown(xe_sum / max(n, 1), mlc_sum / max(n, 1))


def _save_state(out: Path, model: GroundedCaptioner, opt: Adam, epoch: int, result: TrainResult) -> None:
    model.save(out / "last.vlam")
    moments = {f"m.{k}": v for k, v in opt.state.m.items()}
    moments.update({f"v.{k}": v for k, v in opt.state.v.items()})
    numerics.save(out / "optim.vlam", moments)
    state = {"epoch": epoch, "step": opt.state.step, "best_epoch": result.best_epoch, "best_val": result.best_val}
    (out / "train_state.json").write_text(json.dumps(state, sort_keys=True) + "\n")


def _load_state(out: Path, model: GroundedCaptioner, opt: Adam, result: TrainResult) -> int:
    state = json.loads((out / "train_state.json").read_text())
    model.load(out / "last.vlam")
    moments = numerics.load(out / "optim.vlam")
    opt.state.step = int(state["step"])
    opt.state.m = {k[2:]: v for k, v in moments.items() if k.startswith("m.")}
    opt.state.v = {k[2:]: v for k, v in moments.items() if k.startswith("v.")}
    result.best_epoch = int(state["best_epoch"])
    result.best_val = float(state["best_val"])
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        for line in log_path.read_text().splitlines():
            rec = json.loads(line)
            if rec["epoch"] <= state["epoch"]:
                result.history.append(EpochRecord(**rec))
    return int(state["epoch"]) + 1


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Teacher-forced training on total = l_xe + l_mlc with Adam and a stepped LR schedule.

    ``stop_after`` ends the run after that many epochs (counted from epoch 0), which is how
    interrupted runs are simulated in tests.
    """
    cfg = copy.deepcopy(cfg)
    cfg.model.decoder.vocab_size = len(corpus.vocab)
    cfg.model.encoder.num_relations = len(corpus.relations)
    cfg.validate()
    model = GroundedCaptioner(cfg.model)
    opt = Adam(model.named_parameters())
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    start_epoch = 0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "train_state.json").exists():
            start_epoch = _load_state(out, model, opt, result)
        elif (out / "train_log.jsonl").exists():
            (out / "train_log.jsonl").unlink()

    train_set = corpus.split("train")
    val_set = corpus.split("val")
    dtype = model.encoder.pos.dtype.type
    n_rel = cfg.model.encoder.num_relations
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    augment = cfg.augment_flip or cfg.augment_shift
    tok_map, rel_map = _mirror_maps(corpus.vocab, corpus.relations)
    for epoch in range(start_epoch, last_epoch):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        order = _epoch_order(cfg.seed, epoch, len(train_set))
        xe_acc = mlc_acc = 0.0
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_set[i] for i in order[start : start + cfg.batch_size]]
            batch = make_batch(chunk, corpus.vocab, n_rel, dtype)
            if augment:
                rng = np.random.default_rng([cfg.seed, epoch, start])
                batch = augment_batch(batch, rng, cfg.model.encoder.patch_size, cfg.augment_flip, cfg.augment_shift, tok_map, rel_map)
            opt.zero_grad()
            xe, mlc = forward_losses(model, batch)
            total = xe if mlc is None else xe + mlc
            value = float(total.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"epoch {epoch} batch at {start}: l_xe={float(xe.data)} "
                    f"l_mlc={float(mlc.data) if mlc is not None else 0.0}"
                )
            total.backward()
            grads = opt.grads()
            clip_grad_norm(grads, cfg.clip_norm)
            opt.step(lr, grads)
            xe_acc += float(xe.data) * len(chunk)
            mlc_acc += (float(mlc.data) if mlc is not None else 0.0) * len(chunk)
            seen += len(chunk)
        val = validation_loss(model, val_set, corpus.vocab) if val_set else LossBreakdown(float("nan"), 0.0)
        rec = EpochRecord(
            epoch=epoch,
            l_xe=xe_acc / seen,
            l_mlc=mlc_acc / seen,
            total=(xe_acc + mlc_acc) / seen,
            val_total=val.total,
            lr=lr,
            wall=time.perf_counter() - t0,
        )
        result.history.append(rec)
        log.info("epoch %d  l_xe %.4f  l_mlc %.4f  val %.4f  lr %.2e  %.1fs", epoch, rec.l_xe, rec.l_mlc, rec.val_total, lr, rec.wall)
        if on_epoch:
            on_epoch(rec)
        if val_set and val.total < result.best_val:
            result.best_val, result.best_epoch = val.total, epoch
            if out is not None:
                model.save(out / "best.vlam")
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(rec.to_json() + "\n")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                model.save(out / f"epoch_{epoch + 1:03d}.vlam")
            _save_state(out, model, opt, epoch, result)
    return result


# ------------------------------------------------------------------ ablation
ABLATION_FLAGS = ("use_rgm", "use_cls", "use_rel")


def parse_axes(spec: str) -> list[dict]:
    """Expand an axis spec into cells.

    Comma-separated axes; each axis is a flag name (tries off/on), ``a+b`` (flags toggled
    together), or ``name=v1|v2`` for heads / rel_layers.
    """
    axes: list[list[dict]] = []
    for raw in filter(None, (a.strip() for a in spec.split(","))):
        if "=" in raw:
            name, values = raw.split("=", 1)
            if name not in ("heads", "rel_layers"):
                raise ValueError(f"unknown numeric axis {name!r}")
            axes.append([{name: int(v)} for v in values.split("|")])
        else:
            names = raw.split("+")
            for n in names:
                if n not in ABLATION_FLAGS:
                    raise ValueError(f"unknown ablation flag {n!r}")
            axes.append([{n: False for n in names}, {n: True for n in names}])
    cells = []
    for combo in itertools.product(*axes) if axes else [()]:
        cell: dict = {}
        for part in combo:
            cell.update(part)
        cells.append(cell)
    return cells


def apply_cell(cfg: TrainConfig, cell: dict) -> TrainConfig:
    cfg = copy.deepcopy(cfg)
    for key, value in cell.items():
        if key in ABLATION_FLAGS:
            setattr(cfg.model, key, value)
        elif key == "heads":
            cfg.model.decoder.heads = value
        elif key == "rel_layers":
            cfg.model.encoder.rel_layers = value
    return cfg


def cell_name(cell: dict) -> str:
    if not cell:
        return "base"
    parts = []
    for k in sorted(cell):
        v = cell[k]
        parts.append(f"{k}={'on' if v is True else 'off' if v is False else v}")
    return ",".join(parts)


@dataclass
class AblationRow:
    cell: str
    exact_match: float | None = None
    f1_all: float | None = None
    f1_loc: float | None = None
    relation_map: float | None = None
    corpus_hash: str = ""
    error: str | None = None


def run_ablation_matrix(
    base: TrainConfig,
    corpus: Corpus,
    cells: Sequence[dict],
    evaluate: Callable[[GroundedCaptioner], dict],
    corpus_hash: str = "",
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train and evaluate every cell with the shared seed; a failing cell is reported, not fatal."""
    rows = []
    for cell in cells:
        name = cell_name(cell)
        log.info("ablation cell %s (corpus %s)", name, corpus_hash[:12])
        try:
            cfg = apply_cell(base, cell)
            cell_dir = Path(out_dir) / name.replace(",", "__").replace("=", "-") if out_dir else None
            result = train(cfg, corpus, cell_dir)
            m = evaluate(result.model)
            rows.append(
                AblationRow(name, m.get("exact_match"), m.get("f1_all"), m.get("f1_loc"), m.get("relation_map"), corpus_hash)
            )
        except Exception as exc:  # noqa: BLE001 - per-cell isolation
            log.exception("cell %s failed", name)
            rows.append(AblationRow(name, corpus_hash=corpus_hash, error=f"{type(exc).__name__}: {exc}"))
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    width = max([len(r.cell) for r in rows] + [4])
    lines = [f"{'cell':<{width}}  exact_match  f1_all  f1_loc  relation_map  error"]
    for r in sorted(rows, key=lambda r: r.cell):
        lines.append(
            f"{r.cell:<{width}}  {fmt(r.exact_match):>11}  {fmt(r.f1_all):>6}  {fmt(r.f1_loc):>6}  "
            f"{fmt(r.relation_map):>12}  {r.error or ''}".rstrip()
        )
    return "\n".join(lines) + "\n"
