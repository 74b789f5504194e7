"""Flat named-tensor checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes  b"OCFSLCKP"
    version  u32
    meta     u32 length + UTF-8 JSON object
    count    u32
    count x  { u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
               prod(dims) x float64 values, row-major }
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"OCFSLCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors, meta=None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes):
    """Return ``(tensors, meta)``; tensors keep file order."""
    try:
        return _parse(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint ({exc})") from exc


def _parse(blob: bytes):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        tensors[name] = arr.astype(np.float64)
    if off != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta


def save(path, tensors, meta=None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
