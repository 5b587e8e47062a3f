"""ATB1 flat binary weight container.

Layout (all integers little-endian)::

    b"ATB1"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8), u32 rank, rank * u64 dims, prod(dims) * f64 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"ATB1"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic at offset 0: {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported ATB version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    pos = 8

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what} at offset {pos}: need {n} bytes, have {len(buf) - pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * count, f"payload of {name!r}")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
