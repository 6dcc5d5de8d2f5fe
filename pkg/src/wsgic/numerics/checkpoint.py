"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VLAM1"
    repeated, sorted by name:
        u32 name length, name bytes (utf-8)
        u32 rank, rank x i64 extents
        prod(extents) x f32 values (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError

MAGIC = b"VLAM1"


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError("missing VLAM1 header")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(blob):
                raise CheckpointFormatError(f"truncated data for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointFormatError("truncated checkpoint") from exc
    return out


def save(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
