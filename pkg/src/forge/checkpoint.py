"""Flat binary checkpoint format for named float arrays.

Layout (all integers unsigned 32-bit little-endian)::

    b"DNFT" | version | count | count x (name_len | utf-8 name | rank | extents... | f32 payload)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"DNFT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a DNFT checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            out[name] = data.reshape(shape).astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after {count} arrays")
    return out


def save(path: Union[str, Path], arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
