"""Flat binary checkpoint archive.

Byte layout (all integers unsigned little-endian)::

    magic        8 bytes   b"AFCKPT01"
    meta_len     uint32    length of the UTF-8 JSON metadata blob (0 = none)
    meta         meta_len bytes
    count        uint32    number of entries
    then per entry, in insertion order:
      name_len   uint32
      name       name_len bytes, UTF-8 parameter path (e.g. "encoder.stage1.block0.attn.qkv.weight")
      ndim       uint32
      dims       ndim x uint64
      values     prod(dims) x float64, IEEE-754 little-endian, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AFCKPT01"
_F64 = np.dtype("<f8")


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode() if metadata is not None else b""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_F64).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive (bad magic {buf[:8]!r})")
    pos = 8
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    metadata = json.loads(buf[pos:pos + meta_len]) if meta_len else None
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(buf, dtype=_F64, count=n, offset=pos).reshape(shape).astype(
            np.float64)
        pos += 8 * n
    return arrays, metadata
