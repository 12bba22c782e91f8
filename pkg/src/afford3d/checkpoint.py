"""Binary parameter checkpoints.

Layout (little-endian)::

    b"SQAF"  u32 version  u32 entry_count
    per entry: u32 name_len, name (utf-8), u32 dtype_code, u32 rank,
               rank * u32 dims, raw payload

Only dtype code 0 (float32) is written. Entries are written in sorted name
order so identical parameter sets give identical bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SQAF"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray], dtype: str = "<f4") -> bytes:
    dt = np.dtype(dtype)
    code = _CODE_OF[dt]
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=dt).copy(order="C")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<II", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    try:
        return _parse(blob)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header: {exc}") from None


def _parse(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    pos = 4
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<II", blob, pos)
        pos += 8
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        dt = DTYPE_CODES[code]
        size = int(np.prod(dims)) * dt.itemsize
        if pos + size > len(blob):
            raise CheckpointError(f"{name}: truncated payload")
        out[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
        pos += size
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
