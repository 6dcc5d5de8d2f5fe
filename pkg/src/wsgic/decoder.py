"""Grounded language decoder: LSTM/GLU language module plus the recurrent grounding module.

All step functions work on a batch axis B; single-caption use is B == 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DecoderConfig
from .errors import ShapeMismatchError, UnknownTokenError
from .numerics import (
    FFN,
    GLU,
    Embedding,
    LayerNorm,
    Linear,
    LSTMCell,
    Module,
    Tensor,
    concat,
    mean_pool,
    no_grad,
    softmax,
)
from .numerics import tensor as T


@dataclass
class AttentionState:
    s_full: Tensor  # (B, N_h, n_special + N), softmax over the last axis
    s_star: Tensor  # (B, N_h, N): s_full without the special-token columns
    s_star_sum: Tensor  # (B, N): sum of s_star over heads


@dataclass
class StepState:
    h: Tensor
    cell: Tensor
    c_prev: Tensor
    s_star_sum_prev: Tensor


@dataclass
class WordStepOutput:
    logits: Tensor  # (B, |vocab|)
    c: Tensor  # (B, d)
    attn: AttentionState


@dataclass
class VisualContext:
    """Per-image quantities reused at every step: V, its mean row, and per-head keys/values."""

    V: Tensor
    v_bar: Tensor
    keys: Tensor  # (B, N_h, d_h, S)
    values: Tensor  # (B, N_h, S, d_h)
    n_special: int

    @property
    def batch(self) -> int:
        return self.V.shape[0]

    @property
    def num_patches(self) -> int:
        return self.V.shape[1] - self.n_special


@dataclass
class DecodeResult:
    tokens: list[int]
    s_star_sums: list[np.ndarray] = field(default_factory=list)  # one length-N vector per emitted token
    truncated: bool = False


class GroundedDecoder(Module):
    def __init__(self, cfg: DecoderConfig, num_patches: int, rng: np.random.Generator, use_rgm: bool = True):
        self.cfg = cfg
        self.use_rgm = use_rgm
        self.num_patches = num_patches
        d = cfg.dim
        self.embed = Embedding(rng, cfg.vocab_size, d)
        self.lstm = LSTMCell(rng, 2 * d, d)
        if use_rgm:
            self.recur = Linear(rng, num_patches, d)  # f(s*_{t-1}); bias starts at zero
        self.query = Linear(rng, d, d, bias=False)
        self.key = Linear(rng, d, d, bias=False)
        self.value = Linear(rng, d, d)
        self.attn_out = Linear(rng, d, d)
        self.glu = GLU(rng, d)
        self.ffn = FFN(rng, d, cfg.ffn_hidden)
        self.ln = LayerNorm(d)
        self.out = Linear(rng, d, cfg.vocab_size)

    # ------------------------------------------------------------------
    def prepare(self, V: Tensor, n_special: int) -> VisualContext:
        if V.ndim == 2:
            V = T.reshape(V, (1,) + V.shape)
        B, S, d = V.shape
        if d != self.cfg.dim or S - n_special != self.num_patches:
            raise ShapeMismatchError(f"V {V.shape} with {n_special} special rows vs decoder (d={self.cfg.dim}, N={self.num_patches})")
        h, dh = self.cfg.heads, d // self.cfg.heads
        keys = self.key(V).reshape(B, S, h, dh).transpose(0, 2, 3, 1)
        values = self.value(V).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        return VisualContext(V, mean_pool(V, axis=1), keys, values, n_special)

    def initial_state(self, ctx: VisualContext) -> StepState:
        B, d = ctx.batch, self.cfg.dim
        zeros = np.zeros((B, d), dtype=ctx.V.dtype)
        return StepState(Tensor(zeros), Tensor(zeros), Tensor(zeros), Tensor(np.zeros((B, ctx.num_patches), dtype=ctx.V.dtype)))

    def rgm_step(self, h: Tensor, s_star_sum_prev: Tensor, ctx: VisualContext) -> AttentionState:
        """Similarity of the fused query u = h + f(s*_{t-1}) against every row of V, per head."""
        if s_star_sum_prev.shape != (ctx.batch, ctx.num_patches):
            raise ShapeMismatchError(f"previous attention {s_star_sum_prev.shape}, expected {(ctx.batch, ctx.num_patches)}")
        u = h + self.recur(s_star_sum_prev) if self.use_rgm else h
        B, d = u.shape
        nh, dh = self.cfg.heads, d // self.cfg.heads
        q = self.query(u).reshape(B, nh, 1, dh)
        scores = T.matmul(q, ctx.keys) * (1.0 / np.sqrt(dh))  # (B, nh, 1, S)
        s_full = softmax(scores, axis=-1).reshape(B, nh, -1)
        s_star = s_full[:, :, ctx.n_special :]
        return AttentionState(s_full, s_star, s_star.sum(axis=1))

    def attend(self, attn: AttentionState, ctx: VisualContext) -> Tensor:
        """Multi-head attended visual context c_g: per-head weighted values, concatenated, projected."""
        B, nh, S = attn.s_full.shape
        heads = T.matmul(attn.s_full.reshape(B, nh, 1, S), ctx.values)  # (B, nh, 1, dh)
        return self.attn_out(heads.reshape(B, -1))

    def language_step(self, token_ids, state: StepState, ctx: VisualContext) -> tuple[WordStepOutput, StepState]:
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise UnknownTokenError(f"token id outside vocabulary of {self.cfg.vocab_size}")
        x = concat([ctx.v_bar + state.c_prev, self.embed(ids)], axis=-1)
        h, cell = self.lstm(x, state.h, state.cell)
        attn = self.rgm_step(h, state.s_star_sum_prev, ctx)
        c_g = self.attend(attn, ctx)
        c = self.ln(self.ffn(self.glu(h + c_g)))
        logits = self.out(c)
        return WordStepOutput(logits, c, attn), StepState(h, cell, c, attn.s_star_sum)

    def teacher_forced(self, ctx: VisualContext, input_ids: np.ndarray) -> list[WordStepOutput]:
        """One WordStepOutput per input position of a (B, T) id matrix."""
        input_ids = np.asarray(input_ids)
        state = self.initial_state(ctx)
        outputs = []
        for t in range(input_ids.shape[1]):
            out, state = self.language_step(input_ids[:, t], state, ctx)
            outputs.append(out)
        return outputs

    def greedy_decode(self, ctx: VisualContext, bos_id: int, eos_id: int, max_len: int | None = None) -> list[DecodeResult]:
        """Argmax decoding from BOS until EOS or ``max_len`` tokens (ties -> smallest id)."""
        max_len = self.cfg.max_len if max_len is None else max_len
        B = ctx.batch
        results = [DecodeResult([]) for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        tokens = np.full(B, bos_id, dtype=np.int64)
        with no_grad():
            state = self.initial_state(ctx)
            for _ in range(max_len):
                out, state = self.language_step(tokens, state, ctx)
                tokens = np.argmax(out.logits.data, axis=-1)  # first maximum = smallest id
                sums = out.attn.s_star_sum.data
                for b in range(B):
                    if done[b]:
                        continue
                    if tokens[b] == eos_id:
                        done[b] = True
                        continue
                    results[b].tokens.append(int(tokens[b]))
                    results[b].s_star_sums.append(np.array(sums[b], dtype=np.float64))
                if done.all():
                    break
        for b in range(B):
            results[b].truncated = not done[b]
        return results
