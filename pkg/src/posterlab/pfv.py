"""PFV ("poster feature vector") binary files.

Layout, little-endian::

    b"PFV1"
    u16 name_len, name (UTF-8)
    u32 n_records, u32 dim
    n_records x (u16 id_len, id (UTF-8), dim x f32)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"PFV1"
_F32 = np.dtype("<f4")


class PFVFormatError(ValueError):
    pass


def _encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise PFVFormatError(f"string too long for PFV: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def dumps(channel: str, ids: Sequence[str], values: np.ndarray | Sequence[Sequence[float]]) -> bytes:
    ids = list(ids)
    if len(ids) == 0:
        mat = np.zeros((0, 0), dtype=_F32) if len(values) == 0 else np.asarray(values, dtype=_F32)
    else:
        rows = [np.asarray(v, dtype=np.float64).ravel() for v in values]
        if len(rows) != len(ids):
            raise PFVFormatError(f"{len(ids)} ids but {len(rows)} vectors")
        dims = {r.size for r in rows}
        if len(dims) != 1:
            raise PFVFormatError(f"dimension mismatch across records: {sorted(dims)}")
        mat = np.stack(rows).astype(_F32)
    if not np.all(np.isfinite(mat)):
        raise PFVFormatError("non-finite feature values")
    dim = mat.shape[1] if mat.ndim == 2 else 0
    parts = [MAGIC, _encode_str(channel), struct.pack("<II", len(ids), dim)]
    for pid, row in zip(ids, mat):
        parts.append(_encode_str(pid))
        parts.append(row.astype(_F32).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> tuple[str, list[str], np.ndarray]:
    """Parse PFV bytes into ``(channel, ids, float32 matrix)``."""
    if data[:4] != MAGIC:
        raise PFVFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise PFVFormatError("truncated PFV file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def take_str() -> str:
        (n,) = struct.unpack("<H", take(2))
        try:
            return take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PFVFormatError("invalid UTF-8 in PFV string") from exc

    channel = take_str()
    count, dim = struct.unpack("<II", take(8))
    ids = []
    mat = np.empty((count, dim), dtype=_F32)
    for i in range(count):
        ids.append(take_str())
        mat[i] = np.frombuffer(take(4 * dim), dtype=_F32)
    if pos != len(data):
        raise PFVFormatError(f"{len(data) - pos} trailing bytes after last record")
    return channel, ids, mat


def write(path: Path | str, channel: str, ids: Sequence[str], values) -> None:
    Path(path).write_bytes(dumps(channel, ids, values))


def read(path: Path | str) -> tuple[str, list[str], np.ndarray]:
    return loads(Path(path).read_bytes())


def write_records(path: Path | str, records: Iterable) -> None:
    """Write FeatureVector-like objects (``channel``, ``poster_id``, ``values``)."""
    records = list(records)
    if not records:
        raise PFVFormatError("cannot infer channel name from zero records")
    channels = {r.channel for r in records}
    if len(channels) != 1:
        raise PFVFormatError(f"records span several channels: {sorted(channels)}")
    write(path, records[0].channel, [r.poster_id for r in records], [r.values for r in records])
