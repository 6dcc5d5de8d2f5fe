"""Grounding F1 (all / loc), IoU, corpus BLEU and multi-label relation mAP.

F1 convention (fixed here, checked by tests): per object word c,

* a prediction of c is a hit when c is among the image's ground-truth words and
  its box has IoU > 0.5 with at least one ground-truth box of c;
* precision_c = hits / predictions of c;
* recall_c = ground-truth instances of c covered by at least one hit / ground-truth instances of c;
* the score is the macro average of the per-word F1 over the word universe.

``f1_all`` counts every prediction and every ground-truth instance and averages
over words that occur in predictions or ground truth. ``f1_loc`` only keeps
predictions whose word is in the image's ground truth, only counts ground-truth
instances in images where that word was predicted, and averages over words with
at least one such prediction.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpusError, NoPositivesError, NoRecordsError
from .grounding import BoundingBox

IOU_THRESHOLD = 0.5


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Pixel-count IoU with inclusive corners."""
    iw = min(a[2], b[2]) - max(a[0], b[0]) + 1
    ih = min(a[3], b[3]) - max(a[1], b[1]) + 1
    inter = max(iw, 0) * max(ih, 0)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / float(area_a + area_b - inter)


@dataclass
class GroundingRecord:
    image_id: str
    predictions: list[tuple[str, BoundingBox]]
    ground_truth: list[tuple[str, BoundingBox]]  # one entry per instance

    def __post_init__(self):
        self.predictions = [(w.lower(), BoundingBox(*b)) for w, b in self.predictions]
        self.ground_truth = [(w.lower(), BoundingBox(*b)) for w, b in self.ground_truth]


@dataclass
class _Counts:
    preds: int = 0
    hits: int = 0
    gt: int = 0
    covered: int = 0


def _count(records: Sequence[GroundingRecord], loc_only: bool) -> dict[str, _Counts]:
    counts: dict[str, _Counts] = defaultdict(_Counts)
    for rec in records:
        gt_by_word: dict[str, list[BoundingBox]] = defaultdict(list)
        for w, b in rec.ground_truth:
            gt_by_word[w].append(b)
        predicted_words = {w for w, _ in rec.predictions}
        covered: dict[str, set[int]] = defaultdict(set)
        for w, box in rec.predictions:
            gts = gt_by_word.get(w)
            if loc_only and not gts:
                continue
            counts[w].preds += 1
            matched = [i for i, g in enumerate(gts or []) if iou(box, g) > IOU_THRESHOLD]
            if matched:
                counts[w].hits += 1
                covered[w].update(matched)
        for w, gts in gt_by_word.items():
            if loc_only and w not in predicted_words:
                continue
            counts[w].gt += len(gts)
            counts[w].covered += len(covered[w])
    return counts


def _macro_f1(counts: dict[str, _Counts], universe: Iterable[str]) -> float:
    scores = []
    for w in sorted(universe):
        c = counts[w]
        p = c.hits / c.preds if c.preds else 0.0
        r = c.covered / c.gt if c.gt else 0.0
        scores.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return float(sum(scores) / len(scores)) if scores else 0.0


def f1_all(records: Sequence[GroundingRecord]) -> float:
    if not records:
        raise NoRecordsError("f1_all needs at least one record")
    counts = _count(records, loc_only=False)
    return _macro_f1(counts, [w for w, c in counts.items() if c.preds or c.gt])


def f1_loc(records: Sequence[GroundingRecord]) -> float:
    if not records:
        raise NoRecordsError("f1_loc needs at least one record")
    counts = _count(records, loc_only=True)
    return _macro_f1(counts, [w for w, c in counts.items() if c.preds])


# ---------------------------------------------------------------- BLEU
def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]], n: int = 4) -> float:
    """Corpus BLEU-n: clipped n-gram precisions pooled over the corpus, uniform geometric mean, brevity penalty.

    ``references[i]`` is the list of reference token lists for ``candidates[i]``.
    """
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if not candidates or len(candidates) != len(references):
        raise EmptyCorpusError("need one reference set per candidate and a non-empty corpus")
    matches = [0] * n
    totals = [0] * n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise EmptyCorpusError("every candidate needs at least one reference")
        cand_len += len(cand)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            cand_counts = _ngrams(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(r, k)
            matches[k - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0:
        return 0.0
    if any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def exact_match(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    if not candidates:
        raise EmptyCorpusError("empty corpus")
    return sum(list(c) == list(r) for c, r in zip(candidates, references)) / len(candidates)


# ------------------------------------------------------------- relation mAP
def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean of precision@k over the ranks k of the positives (stable order on ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise NoPositivesError("class has no positive sample")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.nonzero(hits)[0] + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def relation_map(pred_scores, gt) -> float:
    scores = np.asarray(pred_scores, dtype=np.float64)
    labels = np.asarray(gt)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1]) if labels[:, c].any()]
    if not aps:
        raise NoPositivesError("no class has a positive sample")
    return float(np.mean(aps))


# ----------------------------------------------------------------- report
@dataclass
class MetricReport:
    f1_all: float = 0.0
    f1_loc: float = 0.0
    bleu: list[float] = field(default_factory=lambda: [0.0] * 4)
    relation_map: float | None = None
    exact_match: float = 0.0
    n_images: int = 0

    def as_dict(self) -> dict:
        out = {
            "bleu1": self.bleu[0],
            "bleu2": self.bleu[1],
            "bleu3": self.bleu[2],
            "bleu4": self.bleu[3],
            "exact_match": self.exact_match,
            "f1_all": self.f1_all,
            "f1_loc": self.f1_loc,
            "n_images": self.n_images,
        }
        if self.relation_map is not None:
            out["relation_map"] = self.relation_map
        return dict(sorted(out.items()))

    def to_table(self) -> str:
        rows = self.as_dict()
        width = max(len(k) for k in rows)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        for k, v in rows.items():
            lines.append(f"{k:<{width}}  {v:.6f}" if isinstance(v, float) else f"{k:<{width}}  {v}")
        return "\n".join(lines) + "\n"
