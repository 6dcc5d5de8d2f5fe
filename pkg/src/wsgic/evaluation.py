"""Decode a split, ground the object words, and score everything."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .grounding import BoundingBox
from .metrics import GroundingRecord, MetricReport
from .model import GroundedCaption, GroundedCaptioner, GroundedWord, ground_caption
from .synthcorpus import SceneSample, Vocabulary


@dataclass
class EvalOutput:
    report: MetricReport
    records: list[GroundingRecord]
    captions: dict[str, GroundedCaption] = field(default_factory=dict)

    def result_lines(self) -> list[str]:
        """Key-sorted JSON lines (image id, word, box, score), ordered by image id then position."""
        lines = []
        for image_id in sorted(self.captions):
            for g in self.captions[image_id].grounded:
                rec = {"box": g.box.as_list(), "image_id": image_id, "position": g.position, "score": round(g.score, 6), "word": g.word}
                lines.append(json.dumps(rec, sort_keys=True))
        return lines


def score(
    records: Sequence[GroundingRecord],
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    rel_scores: np.ndarray | None = None,
    rel_labels: np.ndarray | None = None,
) -> MetricReport:
    report = MetricReport(n_images=len(records))
    report.f1_all = metrics.f1_all(records)
    report.f1_loc = metrics.f1_loc(records)
    refs = [[r] for r in references]
    report.bleu = [metrics.bleu(candidates, refs, n) for n in range(1, 5)]
    report.exact_match = metrics.exact_match(candidates, references)
    if rel_scores is not None and rel_labels is not None and rel_labels.any():
        report.relation_map = metrics.relation_map(rel_scores, rel_labels)
    return report


def relation_labels(samples: Sequence[SceneSample], n_classes: int) -> np.ndarray:
    z = np.zeros((len(samples), n_classes), dtype=np.int64)
    for i, s in enumerate(samples):
        z[i, s.relation_ids] = 1
    return z


def evaluate(
    model: GroundedCaptioner,
    samples: Sequence[SceneSample],
    vocab: Vocabulary,
    groundable: Sequence[str],
    rho: float = 0.05,
    batch_size: int = 100,
) -> EvalOutput:
    groundable_set = set(groundable)
    enc_cfg = model.cfg.encoder
    captions: dict[str, GroundedCaption] = {}
    records, cands, refs, rel_rows = [], [], [], []
    dtype = model.encoder.pos.dtype.type
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk]).astype(dtype) / dtype(255.0)
        results, rel = model.decode(images)
        if rel is not None:
            rel_rows.append(rel)
        for s, res in zip(chunk, results):
            gc = ground_caption(res, vocab.itos, groundable_set, enc_cfg.grid, enc_cfg.patch_size, rho)
            captions[s.sample_id] = gc
            records.append(GroundingRecord(s.sample_id, [(g.word, g.box) for g in gc.grounded], s.gt_words()))
            cands.append(gc.words)
            refs.append(list(s.caption))
    rel_scores = np.concatenate(rel_rows) if rel_rows else None
    labels = relation_labels(samples, enc_cfg.num_relations) if rel_scores is not None else None
    return EvalOutput(score(records, cands, refs, rel_scores, labels), records, captions)


def evaluate_oracle(samples: Sequence[SceneSample]) -> EvalOutput:
    """Feed ground-truth captions and boxes through the metric path; every F1 must come out 1.0."""
    records = [GroundingRecord(s.sample_id, s.gt_words(), s.gt_words()) for s in samples]
    caps = [list(s.caption) for s in samples]
    captions = {
        s.sample_id: GroundedCaption(
            list(s.caption), [GroundedWord(pos, s.caption[pos], box, None, 1.0) for pos, box in s.groundable]
        )
        for s in samples
    }
    return EvalOutput(score(records, caps, caps), records, captions)


def parse_result_line(line: str) -> tuple[str, str, BoundingBox, float]:
    rec = json.loads(line)
    return rec["image_id"], rec["word"], BoundingBox(*rec["box"]), rec["score"]
