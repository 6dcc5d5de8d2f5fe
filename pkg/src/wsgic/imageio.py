"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BadDimensionsError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    arr = rgb if rgb.dtype == np.uint8 else to_uint8(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise BadDimensionsError(f"PPM needs HxWx3, got {arr.shape}")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode() + arr.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    arr = gray if gray.dtype == np.uint8 else to_uint8(gray)
    if arr.ndim != 2:
        raise BadDimensionsError(f"PGM needs HxW, got {arr.shape}")
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode() + arr.tobytes()


def _read_header(blob: bytes, magic: bytes):
    if not blob.startswith(magic):
        raise BadDimensionsError(f"expected {magic.decode()} image")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise BadDimensionsError("only 8-bit images are supported")
    return w, h, pos + 1


def decode_ppm(blob: bytes) -> np.ndarray:
    w, h, pos = _read_header(blob, b"P6")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()


def decode_pgm(blob: bytes) -> np.ndarray:
    w, h, pos = _read_header(blob, b"P5")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def write_pgm(path, gray: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(gray))


def read_ppm(path) -> np.ndarray:
    """Load as float HxWx3 in [0, 1]."""
    return decode_ppm(Path(path).read_bytes()).astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())
