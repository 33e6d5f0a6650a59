"""VTSF1 binary tensor files and named-tensor tables.

Single tensor layout::

    b"VTSF1\\0" | u32 rank | rank x u32 dims | prod(dims) x f32      (all little-endian)

A named table (used for checkpoints) is ``u32 count`` followed by ``count``
entries of ``u32 name_len | utf-8 name | <single tensor>``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"VTSF1\x00"


def write_tensor(f: BinaryIO, arr) -> None:
    a = np.asarray(arr)
    if a.ndim == 0:
        a = a.reshape(1)
    if any(n < 1 for n in a.shape):
        raise FormatError(f"tensor extents must be >= 1, got {a.shape}")
    f.write(MAGIC)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    head = f.read(4)
    if len(head) != 4:
        raise FormatError("truncated header")
    (rank,) = struct.unpack("<I", head)
    if rank < 1 or rank > 32:
        raise FormatError(f"invalid rank {rank}")
    dims_raw = f.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise FormatError("truncated dims")
    dims = struct.unpack(f"<{rank}I", dims_raw)
    if any(d < 1 for d in dims):
        raise FormatError(f"invalid dims {dims}")
    count = int(np.prod(dims))
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"payload truncated: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    out = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor")
    return out


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def save_table(path, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, tensors[name])
    Path(path).write_bytes(buf.getvalue())


def load_table(path) -> dict[str, np.ndarray]:
    buf = io.BytesIO(Path(path).read_bytes())
    head = buf.read(4)
    if len(head) != 4:
        raise FormatError("truncated table header")
    (count,) = struct.unpack("<I", head)
    out = {}
    for _ in range(count):
        raw = buf.read(4)
        if len(raw) != 4:
            raise FormatError("truncated table entry")
        (n,) = struct.unpack("<I", raw)
        name_raw = buf.read(n)
        if len(name_raw) != n:
            raise FormatError("truncated tensor name")
        try:
            name = name_raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not utf-8: {e}") from e
        out[name] = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after table")
    return out
