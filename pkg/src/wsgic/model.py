"""The full grounded captioner: encoder + decoder, and decode-then-ground for one batch of images."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics
from .config import ModelConfig
from .decoder import DecodeResult, GroundedDecoder, VisualContext
from .encoder import EncoderOutput, ImageEncoder
from .grounding import BoundingBox, Vlam, ground_word
from .numerics import Module, no_grad
from .synthcorpus import BOS_ID, EOS_ID


class GroundedCaptioner(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = ImageEncoder(cfg.encoder, rng, use_cls=cfg.use_cls, use_rel=cfg.use_rel)
        self.decoder = GroundedDecoder(cfg.decoder, cfg.encoder.num_patches, rng, use_rgm=cfg.use_rgm)

    def encode(self, images: np.ndarray) -> tuple[EncoderOutput, VisualContext]:
        enc = self.encoder(images)
        return enc, self.decoder.prepare(enc.V, enc.n_special)

    def decode(self, images: np.ndarray, max_len: int | None = None) -> tuple[list[DecodeResult], np.ndarray | None]:
        """Greedy captions for a batch plus sigmoid relation scores (None without the [REL] branch)."""
        with no_grad():
            enc, ctx = self.encode(images)
            results = self.decoder.greedy_decode(ctx, BOS_ID, EOS_ID, max_len)
        rel = None
        if enc.rel_logits is not None:
            rel = 1.0 / (1.0 + np.exp(-enc.rel_logits.data.astype(np.float64)))
        return results, rel

    def save(self, path) -> None:
        numerics.save(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(numerics.load(path))


@dataclass
class GroundedWord:
    position: int
    word: str
    box: BoundingBox
    vlam: Vlam | None  # None for injected ground truth
    score: float


@dataclass
class GroundedCaption:
    words: list[str]
    grounded: list[GroundedWord] = field(default_factory=list)
    truncated: bool = False


def ground_caption(
    result: DecodeResult,
    itos: Sequence[str],
    groundable: set[str],
    grid: tuple[int, int],
    patch: int,
    rho: float,
) -> GroundedCaption:
    words = [itos[t] for t in result.tokens]
    out = GroundedCaption(words, truncated=result.truncated)
    for pos, (word, sims) in enumerate(zip(words, result.s_star_sums)):
        if word not in groundable:
            continue
        vlam, box = ground_word(sims, grid, patch, rho, word_index=pos)
        out.grounded.append(GroundedWord(pos, word, box, vlam, float(np.max(sims))))
    return out


def load_model(cfg: ModelConfig, path: str | Path) -> GroundedCaptioner:
    model = GroundedCaptioner(cfg)
    model.load(path)
    return model
