"""Top-down image encoder: ViT backbone with [CLS], a [REL] branch over stop-gradient patches, and fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import EncoderConfig
from .errors import BadDimensionsError, ShapeMismatchError
from .numerics import LayerNorm, Linear, Module, Parameter, Tensor, TransformerBlock, concat, relu, stop_gradient
from .numerics import tensor as T


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """Split an H x W x 3 image (or a batch of them) into row-major flattened P x P patches.

    Returns (N, 3*P*P), or (B, N, 3*P*P) for batched input, with patches in row-major grid order.
    """
    arr = np.asarray(img)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise BadDimensionsError(f"expected H x W x 3 image(s), got {np.asarray(img).shape}")
    b, h, w, c = arr.shape
    if h % patch or w % patch:
        raise BadDimensionsError(f"{h}x{w} image is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    rows = arr.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)
    return rows if batched else rows[0]


def unpatchify(rows: np.ndarray, height: int, width: int, patch: int) -> np.ndarray:
    gh, gw = height // patch, width // patch
    return rows.reshape(gh, gw, patch, patch, 3).transpose(0, 2, 1, 3, 4).reshape(height, width, 3)


PIXEL_CENTRE = 0.5


@dataclass
class EncoderOutput:
    V: Tensor  # (B, n_special + N, d), rows [REL?; CLS?; patches]
    rel_logits: Tensor | None  # (B, N_c)
    n_special: int
    z_cls: Tensor
    z_patch: Tensor


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, use_cls: bool = True, use_rel: bool = True):
        self.cfg = cfg
        self.use_cls = use_cls
        self.use_rel = use_rel
        D, n = cfg.dim, cfg.num_patches
        self.patch_proj = Linear(rng, 3 * cfg.patch_size**2, D)
        # bias starts so that a mid-grey patch embeds to zero; otherwise the shared pixel
        # offset dwarfs the zero-initialised positional embeddings
        self.patch_proj.bias.data = -PIXEL_CENTRE * self.patch_proj.weight.data.sum(axis=0)
        self.pos = Parameter(np.zeros((n + 1, D)), "pos")
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=D), "cls_token")
        self.blocks = [TransformerBlock(rng, D, cfg.heads, cfg.ffn_mult * D) for _ in range(cfg.layers)]
        self.norm = LayerNorm(D)
        if use_rel:
            self.rel_token = Parameter(rng.normal(0.0, 0.02, size=D), "rel_token")
            self.rel_blocks = [TransformerBlock(rng, D, cfg.heads, cfg.ffn_mult * D) for _ in range(cfg.rel_layers)]
            self.rel_head = RelationHead(rng, D, cfg.num_relations)
        self.fuse = Linear(rng, D, cfg.fused_dim)

    # -- stages ---------------------------------------------------------
    def embed(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """Patch projection plus positional embeddings; returns (patch_embeds, cls_with_pos)."""
        rows = patchify(images, self.cfg.patch_size)
        if rows.ndim == 2:
            rows = rows[None]
        if rows.shape[1] != self.cfg.num_patches:
            raise BadDimensionsError(f"image gives {rows.shape[1]} patches, model expects {self.cfg.num_patches}")
        x = self.patch_proj(Tensor(rows.astype(self.pos.dtype)))
        return x + self.pos[1:], self.cls_token + self.pos[0]

    def encode_backbone(self, patch_embeds: Tensor, cls_token: Tensor) -> tuple[Tensor, Tensor]:
        """Run the L backbone layers over [CLS; patches]; returns (z_cls (B,D), Z_patch (B,N,D))."""
        if patch_embeds.ndim != 3 or patch_embeds.shape[-1] != self.cfg.dim or cls_token.shape != (self.cfg.dim,):
            raise ShapeMismatchError(f"backbone input {patch_embeds.shape} / cls {cls_token.shape}")
        B = patch_embeds.shape[0]
        cls_rows = T.reshape(cls_token, (1, 1, -1)) + Tensor(np.zeros((B, 1, 1), dtype=cls_token.dtype))
        x = concat([cls_rows, patch_embeds], axis=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0], x[:, 1:]

    def relation_encode(self, z_patch: Tensor) -> Tensor:
        """[REL] row after L_r layers over [z_rel^0; sg(Z_patch)]. Z_patch receives no gradient here."""
        if z_patch.ndim != 3 or z_patch.shape[-1] != self.cfg.dim:
            raise ShapeMismatchError(f"relation branch input {z_patch.shape}")
        frozen = stop_gradient(z_patch)
        B = frozen.shape[0]
        rel = T.reshape(self.rel_token, (1, 1, -1)) + Tensor(np.zeros((B, 1, 1), dtype=frozen.dtype))
        x = concat([rel, frozen], axis=1)
        for block in self.rel_blocks:
            x = block(x)
        return x[:, 0]

    def fuse_project(self, z_rel: Tensor | None, z_cls: Tensor | None, z_patch: Tensor) -> Tensor:
        """One shared linear map D -> d over all rows, ordered [REL; CLS; patches]."""
        parts = [T.reshape(z, (z.shape[0], 1, -1)) for z in (z_rel, z_cls) if z is not None]
        rows = concat(parts + [z_patch], axis=1) if parts else z_patch
        if rows.shape[-1] != self.fuse.weight.shape[0]:
            raise ShapeMismatchError(f"fuse input {rows.shape} vs projection {self.fuse.weight.shape}")
        return self.fuse(rows)

    def __call__(self, images: np.ndarray) -> EncoderOutput:
        patches, cls = self.embed(images)
        z_cls, z_patch = self.encode_backbone(patches, cls)
        z_rel = rel_logits = None
        if self.use_rel:
            z_rel = self.relation_encode(z_patch)
            rel_logits = self.rel_head(z_rel)
        V = self.fuse_project(z_rel, z_cls if self.use_cls else None, z_patch)
        return EncoderOutput(V, rel_logits, int(self.use_rel) + int(self.use_cls), z_cls, z_patch)


class RelationHead(Module):
    """Two-layer MLP D -> D -> N_c producing relation logits."""

    def __init__(self, rng, d: int, n_classes: int):
        self.fc1 = Linear(rng, d, d)
        self.fc2 = Linear(rng, d, n_classes)

    def __call__(self, z_rel: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(z_rel)))

