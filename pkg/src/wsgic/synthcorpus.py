"""Synthetic shape scenes with templated captions, boxes and relation labels.

Scenes are placed on a coarse cell grid (the patch size at desk scale), so a
well-localised patch attention can reach IoU 1 with the ground truth. The
caption always names the two objects whose colours come first in palette
order, lowest first; a third object, when present, carries a later colour and
acts as a distractor.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import CorpusConfig, SceneSpec
from .errors import EmptyCorpusError, InfeasiblePlacementError
from .grounding import BoundingBox
from .imageio import decode_ppm, encode_ppm

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

PALETTE = {
    "red": (0.86, 0.16, 0.14),
    "green": (0.14, 0.72, 0.22),
    "blue": (0.16, 0.26, 0.90),
    "yellow": (0.96, 0.86, 0.10),
    "magenta": (0.85, 0.20, 0.80),
    "cyan": (0.10, 0.80, 0.85),
}
BACKGROUND = 0.5

# size of each role in cells
SMALL_SIZES = (2, 3)
CONTAINER_SIZE = 4
CONTAINED_SIZE = 2
CONTAINERS = ("square", "circle")


@dataclass
class SceneObject:
    color: str
    shape: str
    box: BoundingBox  # tight pixel box


@dataclass
class SceneSample:
    image: np.ndarray  # H x W x 3 uint8
    caption: list[str]
    groundable: list[tuple[int, BoundingBox]]  # (token position, box)
    relations: set[str]
    seed: int
    objects: list[SceneObject] = field(default_factory=list)
    relation_ids: list[int] = field(default_factory=list)
    sample_id: str = ""
    split: str = ""

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float32) / 255.0

    def gt_words(self) -> list[tuple[str, BoundingBox]]:
        return [(self.caption[pos], box) for pos, box in self.groundable]


# ------------------------------------------------------------------ rendering
def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint; its tight box is always the full square."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        c = (size - 1) / 2.0
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    if shape == "triangle":
        # apex at the top centre, base on the last row
        half = (yy + 1) * size / (2.0 * size)
        return np.abs(xx + 0.5 - size / 2.0) <= half
    raise ValueError(f"unknown shape {shape!r}")


def _tight_box(mask: np.ndarray, x0: int, y0: int) -> BoundingBox:
    rows, cols = np.nonzero(mask)
    return BoundingBox(x0 + int(cols.min()), y0 + int(rows.min()), x0 + int(cols.max()), y0 + int(rows.max()))


@dataclass
class _Placement:
    shape: str
    row: int  # top-left cell
    col: int
    size: int  # cells

    def cells(self):
        return self.row, self.col, self.row + self.size, self.col + self.size


def _gap(a: _Placement, b: _Placement) -> int:
    """Chebyshev gap in cells between two cell rectangles (negative when overlapping)."""
    ar0, ac0, ar1, ac1 = a.cells()
    br0, bc0, br1, bc1 = b.cells()
    return max(br0 - ar1, ar0 - br1, bc0 - ac1, ac0 - bc1)


def _place_pair(rng: np.random.Generator, relation: str, shapes, grid_rows: int, grid_cols: int, min_gap: int = 1):
    """Subject and object placements that realise ``relation`` unambiguously, or None."""
    if relation == "inside":
        if CONTAINER_SIZE > min(grid_rows, grid_cols):
            return None
        outer = _Placement(str(rng.choice(CONTAINERS)), 0, 0, CONTAINER_SIZE)
        outer.row = int(rng.integers(0, grid_rows - CONTAINER_SIZE + 1))
        outer.col = int(rng.integers(0, grid_cols - CONTAINER_SIZE + 1))
        off = (CONTAINER_SIZE - CONTAINED_SIZE) // 2
        inner = _Placement(str(rng.choice(shapes)), outer.row + off, outer.col + off, CONTAINED_SIZE)
        return inner, outer
    s = _Placement(str(rng.choice(shapes)), 0, 0, int(rng.choice(SMALL_SIZES)))
    o = _Placement(str(rng.choice(shapes)), 0, 0, int(rng.choice(SMALL_SIZES)))
    if max(s.size, o.size) > min(grid_rows, grid_cols):
        return None
    if relation == "touching":
        gap = 0
        axis = "v" if rng.random() < 0.5 else "h"
        first_is_subject = rng.random() < 0.5
    else:
        gap = int(rng.integers(min_gap, min_gap + 2))
        axis = "v" if relation in ("above", "below") else "h"
        first_is_subject = relation in ("above", "left_of")
    first, second = (s, o) if first_is_subject else (o, s)
    if axis == "v":
        span = first.size + gap + second.size
        if span > grid_rows:
            return None
        first.row = int(rng.integers(0, grid_rows - span + 1))
        second.row = first.row + first.size + gap
        first.col = int(rng.integers(0, grid_cols - first.size + 1))
        lo = max(0, first.col - second.size + 1)
        hi = min(grid_cols - second.size, first.col + first.size - 1)
        second.col = int(rng.integers(lo, hi + 1))
    else:
        span = first.size + gap + second.size
        if span > grid_cols:
            return None
        first.col = int(rng.integers(0, grid_cols - span + 1))
        second.col = first.col + first.size + gap
        first.row = int(rng.integers(0, grid_rows - first.size + 1))
        lo = max(0, first.row - second.size + 1)
        hi = min(grid_rows - second.size, first.row + first.size - 1)
        second.row = int(rng.integers(lo, hi + 1))
    return s, o


def generate_scene(seed: int, spec: SceneSpec | None = None) -> SceneSample:
    """Render one scene; fully determined by ``seed`` and ``spec``."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    cell = spec.cell
    grid_rows, grid_cols = spec.height // cell, spec.width // cell
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    relation = str(rng.choice(spec.relations))
    color_idx = sorted(rng.choice(len(spec.colors), size=n_objects, replace=False).tolist())
    colors = [spec.colors[i] for i in color_idx]

    placements = None
    for _ in range(spec.max_attempts):
        pair = _place_pair(rng, relation, spec.shapes, grid_rows, grid_cols, spec.min_gap)
        if pair is None:
            continue
        subj, obj = pair
        placed = [subj, obj]
        ok = True
        for _extra in range(n_objects - 2):
            d = _Placement(str(rng.choice(spec.shapes)), 0, 0, int(rng.choice(SMALL_SIZES)))
            if d.size > min(grid_rows, grid_cols):
                ok = False
                break
            d.row = int(rng.integers(0, grid_rows - d.size + 1))
            d.col = int(rng.integers(0, grid_cols - d.size + 1))
            if any(_gap(d, p) < 1 for p in placed):
                ok = False
                break
            placed.append(d)
        if ok:
            placements = placed
            break
    if placements is None:
        raise InfeasiblePlacementError(f"seed {seed}: no placement after {spec.max_attempts} attempts")

    canvas = np.full((spec.height, spec.width, 3), BACKGROUND, dtype=np.float64)
    objects: list[SceneObject] = []
    # containers first so the contained shape is drawn on top
    draw_order = sorted(range(len(placements)), key=lambda i: -placements[i].size)
    boxes: dict[int, BoundingBox] = {}
    for i in draw_order:
        p = placements[i]
        px = p.size * cell
        mask = shape_mask(p.shape, px)
        y0, x0 = p.row * cell, p.col * cell
        canvas[y0 : y0 + px, x0 : x0 + px][mask] = PALETTE[colors[i]]
        boxes[i] = _tight_box(mask, x0, y0)
    for i, p in enumerate(placements):
        objects.append(SceneObject(colors[i], p.shape, boxes[i]))

    noise = rng.uniform(-spec.noise, spec.noise, size=canvas.shape)
    image = np.clip(np.rint((canvas + noise) * 255.0), 0, 255).astype(np.uint8)

    subj, obj = objects[0], objects[1]
    caption = ["a", subj.color, subj.shape, relation, "a", obj.color, obj.shape]
    groundable = [(2, subj.box), (6, obj.box)]
    return SceneSample(image, caption, groundable, {relation}, int(seed), objects)


# --------------------------------------------------------------- vocabulary
@dataclass
class Vocabulary:
    itos: list[str]
    counts: dict[str, int]
    min_count: int = 5

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_text(self) -> str:
        # key-sorted: one "token<TAB>id<TAB>count" line per token
        rows = sorted(self.itos)
        return "".join(f"{t}\t{self.stoi[t]}\t{self.counts.get(t, 0)}\n" for t in rows)

    @classmethod
    def from_text(cls, text: str, min_count: int = 5) -> "Vocabulary":
        entries = []
        counts = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            tok, idx, cnt = line.split("\t")
            entries.append((int(idx), tok))
            counts[tok] = int(cnt)
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError("vocabulary ids must be dense from 0")
        return cls([t for _, t in entries], counts, min_count)


def build_vocabulary(captions: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times; ids by descending count then alphabetically."""
    counts = Counter(tok for cap in captions for tok in cap)
    kept = sorted((t for t, n in counts.items() if n >= min_count and t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, dict(counts), min_count)


# ---------------------------------------------------------------- relations
def extract_relations(caption: Sequence[str] | str, lexicon: Iterable[str]) -> set[str]:
    """Greedy longest-match scan of the caption against single- and multi-word lexicon entries."""
    tokens = caption.split() if isinstance(caption, str) else list(caption)
    phrases = sorted({tuple(entry.split()) for entry in lexicon}, key=len, reverse=True)
    hits: set[str] = set()
    i = 0
    while i < len(tokens):
        for ph in phrases:
            if tuple(tokens[i : i + len(ph)]) == ph:
                hits.add(" ".join(ph))
                i += len(ph)
                break
        else:
            i += 1
    return hits


def relation_stats(captions: Iterable[Sequence[str]], lexicon: Iterable[str]) -> list[tuple[str, int]]:
    """Relation word frequencies, descending, ties alphabetical (one count per caption occurrence set)."""
    lexicon = list(lexicon)
    counts = Counter(rel for cap in captions for rel in extract_relations(cap, lexicon))
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


@dataclass
class RelationClassSet:
    words: list[str]
    counts: list[int]
    kept: list[int] = field(default_factory=list, repr=False)  # captions with >= 1 selected class
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.words)

    def index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.words)}

    def to_text(self) -> str:
        return "".join(f"{i}\t{w}\t{c}\n" for i, (w, c) in enumerate(zip(self.words, self.counts)))

    @classmethod
    def from_text(cls, text: str) -> "RelationClassSet":
        words, counts = [], []
        for line in text.splitlines():
            if line.strip():
                _, w, c = line.split("\t")
                words.append(w)
                counts.append(int(c))
        return cls(words, counts)


def select_relation_classes(captions: Sequence[Sequence[str]], lexicon: Iterable[str], k: int) -> RelationClassSet:
    if k < 1:
        raise ValueError("need at least one relation class")
    lexicon = list(lexicon)
    top = relation_stats(captions, lexicon)[:k]
    chosen = {w for w, _ in top}
    kept = [i for i, cap in enumerate(captions) if extract_relations(cap, lexicon) & chosen]
    dropped = len(captions) - len(kept)
    if dropped:
        log.info("dropped %d captions without a selected relation class", dropped)
    return RelationClassSet([w for w, _ in top], [c for _, c in top], kept, dropped)


# ------------------------------------------------------------------- corpus
SPLITS = ("train", "val", "test")


def sample_seed(corpus_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([corpus_seed, SPLITS.index(split), index])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


@dataclass
class Corpus:
    samples: dict[str, list[SceneSample]]
    vocab: Vocabulary
    relations: RelationClassSet
    rejects: int = 0

    def split(self, name: str) -> list[SceneSample]:
        return self.samples[name]

    def manifest_lines(self) -> list[str]:
        lines = []
        for split in SPLITS:
            for s in self.samples.get(split, []):
                rec = {
                    "id": s.sample_id,
                    "split": split,
                    "image": f"images/{s.sample_id}.ppm",
                    "caption": s.caption,
                    "groundable": [
                        {"position": pos, "word": s.caption[pos], "box": box.as_list()} for pos, box in s.groundable
                    ],
                    "relations": s.relation_ids,
                    "seed": s.seed,
                }
                lines.append(json.dumps(rec, sort_keys=True))
        return lines

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for line in self.manifest_lines():
            h.update(line.encode())
            h.update(b"\n")
        for split in SPLITS:
            for s in self.samples.get(split, []):
                h.update(s.image.tobytes())
        h.update(self.vocab.to_text().encode())
        h.update(self.relations.to_text().encode())
        return h.hexdigest()


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    spec = cfg.scene
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    raw: dict[str, list[SceneSample]] = {}
    rejects = 0
    for split in SPLITS:
        out = []
        for i in range(sizes[split]):
            seed = sample_seed(cfg.seed, split, i)
            try:
                s = generate_scene(seed, spec)
            except InfeasiblePlacementError:
                rejects += 1
                continue
            s.sample_id = f"{split}_{i:05d}"
            s.split = split
            out.append(s)
        raw[split] = out
    if not raw["train"]:
        raise EmptyCorpusError("no training samples generated")
    train_caps = [s.caption for s in raw["train"]]
    vocab = build_vocabulary(train_caps, cfg.min_count)
    classes = select_relation_classes(train_caps, spec.relations, cfg.num_relation_classes)
    idx = classes.index()
    samples: dict[str, list[SceneSample]] = {}
    for split in SPLITS:
        kept = []
        for s in raw[split]:
            ids = sorted(idx[r] for r in extract_relations(s.caption, spec.relations) if r in idx)
            if not ids:
                continue
            s.relation_ids = ids
            kept.append(s)
        samples[split] = kept
    return Corpus(samples, vocab, classes, rejects)


def write_corpus(corpus: Corpus, out_dir: str | Path, lexicon: Sequence[str]) -> str:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        for s in corpus.samples.get(split, []):
            (out / "images" / f"{s.sample_id}.ppm").write_bytes(encode_ppm(s.image))
    (out / "manifest.jsonl").write_text("\n".join(corpus.manifest_lines()) + "\n")
    (out / "vocab.txt").write_text(corpus.vocab.to_text())
    (out / "relation_classes.txt").write_text(corpus.relations.to_text())
    all_caps = [s.caption for split in SPLITS for s in corpus.samples.get(split, [])]
    stats = relation_stats([s.caption for s in corpus.samples["train"]], lexicon)
    (out / "relation_stats.txt").write_text("".join(f"{w}\t{c}\n" for w, c in stats))
    digest = corpus.content_hash()
    (out / "corpus_hash.txt").write_text(digest + "\n")
    log.info("wrote %d samples to %s (hash %s)", len(all_caps), out, digest[:12])
    return digest


def read_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {root}")
    vocab = Vocabulary.from_text((root / "vocab.txt").read_text())
    classes = RelationClassSet.from_text((root / "relation_classes.txt").read_text())
    samples: dict[str, list[SceneSample]] = {s: [] for s in SPLITS}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        image = decode_ppm((root / rec["image"]).read_bytes())
        groundable = [(g["position"], BoundingBox(*g["box"])) for g in rec["groundable"]]
        rel_words = {classes.words[i] for i in rec["relations"]}
        s = SceneSample(image, rec["caption"], groundable, rel_words, rec["seed"])
        s.relation_ids = list(rec["relations"])
        s.sample_id = rec["id"]
        s.split = rec["split"]
        samples[rec["split"]].append(s)
    return Corpus(samples, vocab, classes)
