"""Per-word attention vectors to attention maps, masks and boxes."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateMapError, EmptyMaskError, ShapeMismatchError
from .imageio import encode_pgm

DEFAULT_RHO = 0.05


class BoundingBox(NamedTuple):
    """Inclusive pixel corners; x is the column, y the row."""

    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def width(self) -> int:
        return self.x2 - self.x1 + 1

    @property
    def height(self) -> int:
        return self.y2 - self.y1 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def is_valid(self, height: int, width: int) -> bool:
        return 0 <= self.x1 <= self.x2 < width and 0 <= self.y1 <= self.y2 < height

    def as_list(self) -> list[int]:
        return [int(self.x1), int(self.y1), int(self.x2), int(self.y2)]


@dataclass
class Vlam:
    map: np.ndarray  # H x W, non-negative
    word_index: int = -1

    def normalized(self) -> np.ndarray:
        peak = float(self.map.max())
        if peak <= 0:
            raise DegenerateMapError("attention map has no positive value")
        return self.map / peak

    def to_pgm(self) -> bytes:
        return encode_pgm(np.rint(255.0 * self.normalized()).astype(np.uint8))


def upsample_vlam(s_star_sum, grid: tuple[int, int], patch: int, word_index: int = -1) -> Vlam:
    """Reshape a per-patch vector onto the patch grid (row-major) and repeat each value over its P x P block."""
    vec = np.asarray(s_star_sum, dtype=np.float64).reshape(-1)
    rows, cols = grid
    if vec.size != rows * cols:
        raise ShapeMismatchError(f"{vec.size} values for a {rows}x{cols} grid")
    block = vec.reshape(rows, cols)
    return Vlam(np.repeat(np.repeat(block, patch, axis=0), patch, axis=1), word_index)


def threshold_mask(m: Vlam | np.ndarray, rho: float = DEFAULT_RHO) -> np.ndarray:
    """Binary mask of pixels whose max-normalised value is strictly above ``rho``."""
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    arr = m.map if isinstance(m, Vlam) else np.asarray(m, dtype=np.float64)
    peak = float(arr.max()) if arr.size else 0.0
    if peak <= 0:
        raise DegenerateMapError("cannot threshold a map whose maximum is not positive")
    return (arr / peak > rho).astype(np.uint8)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """4-connected labelling. Labels are 1.. in order of each component's first pixel (row-major)."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    sizes: list[int] = []
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        lab = len(sizes) + 1
        labels[start] = lab
        queue = deque([start])
        count = 0
        while queue:
            r, c = queue.popleft()
            count += 1
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not labels[rr, cc]:
                    labels[rr, cc] = lab
                    queue.append((rr, cc))
        sizes.append(count)
    return labels, sizes


def largest_region_box(mask: np.ndarray) -> BoundingBox:
    """Tight box of the largest 4-connected foreground region.

    Ties go to the region whose first pixel comes earliest in row-major order.
    """
    labels, sizes = label_components(mask)
    if not sizes:
        raise EmptyMaskError("mask has no foreground pixel")
    best = int(np.argmax(sizes)) + 1  # argmax returns the first maximum
    rows, cols = np.nonzero(labels == best)
    return BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def ground_word(s_star_sum, grid: tuple[int, int], patch: int, rho: float = DEFAULT_RHO, word_index: int = -1):
    vlam = upsample_vlam(s_star_sum, grid, patch, word_index)
    return vlam, largest_region_box(threshold_mask(vlam, rho))
