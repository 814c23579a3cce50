"""Little-endian binary containers for checkpoints (SZCK) and precomputed features (SZSF).

SZCK layout::

    b"SZCK" | u32 version | u32 count | count x entry
    entry = u32 name_len | utf8 name | u32 rank | rank x u32 dim | f32 payload

SZSF layout::

    b"SZSF" | u32 version | u32 count | u32 n_v | u32 d_v | count x item
    item = u32 id_len | utf8 id | f32[n_v * d_v] dense rows | f32[d_v] global
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CKPT_MAGIC = b"SZCK"
CKPT_VERSION = 1
FEAT_MAGIC = b"SZSF"
FEAT_VERSION = 1

_U32 = struct.Struct("<I")


class CheckpointFormatError(ValueError):
    """Bad magic, truncated payload or unreadable entry."""


class CheckpointVersionError(CheckpointFormatError):
    """File written by an incompatible format version."""


def write_tensor_table(path: str | Path, tensors: Mapping[str, np.ndarray], magic: bytes = CKPT_MAGIC, version: int = CKPT_VERSION) -> None:
    chunks = [magic, _U32.pack(version), _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(a.ndim)]
        chunks += [_U32.pack(d) for d in a.shape]
        chunks.append(a.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated file (wanted {n} bytes at offset {self.pos})")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_tensor_table(path: str | Path, magic: bytes = CKPT_MAGIC, version: int = CKPT_VERSION) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes(), path)
    got = r.take(4)
    if got != magic:
        raise CheckpointFormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    v = r.u32()
    if v != version:
        raise CheckpointVersionError(f"{path}: format version {v}, this build reads version {version}")
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.raw):
        raise CheckpointFormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return out


def bytes_to_f32(raw: bytes) -> np.ndarray:
    """Store arbitrary bytes losslessly as float32 values in [0, 255]."""
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def f32_to_bytes(arr: np.ndarray) -> bytes:
    return np.asarray(arr, dtype=np.float32).astype(np.uint8).tobytes()


def write_features(path: str | Path, items: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> None:
    """Write ``{image_id: (dense n_v x d_v, global d_v)}`` as an SZSF file."""
    shapes = {v[0].shape for v in items.values()}
    if len(shapes) > 1:
        raise ValueError(f"all items need the same dense shape, got {sorted(shapes)}")
    n_v, d_v = shapes.pop() if shapes else (0, 0)
    chunks = [FEAT_MAGIC, _U32.pack(FEAT_VERSION), _U32.pack(len(items)), _U32.pack(n_v), _U32.pack(d_v)]
    for key, (dense, glob) in items.items():
        raw = key.encode("utf-8")
        chunks += [_U32.pack(len(raw)), raw]
        chunks.append(np.asarray(dense, "<f4", order="C").tobytes())
        chunks.append(np.asarray(glob, "<f4", order="C").reshape(d_v).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def index_features(path: str | Path) -> tuple[int, int, dict[str, int]]:
    """Scan an SZSF file; returns (n_v, d_v, {id: byte offset of its dense block})."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != FEAT_MAGIC:
        raise CheckpointFormatError(f"{path}: not an SZSF feature file")
    v = r.u32()
    if v != FEAT_VERSION:
        raise CheckpointVersionError(f"{path}: feature format version {v}, expected {FEAT_VERSION}")
    count, n_v, d_v = r.u32(), r.u32(), r.u32()
    offsets = {}
    item_bytes = 4 * (n_v * d_v + d_v)
    for _ in range(count):
        key = r.take(r.u32()).decode("utf-8")
        offsets[key] = r.pos
        r.take(item_bytes)
    return n_v, d_v, offsets
