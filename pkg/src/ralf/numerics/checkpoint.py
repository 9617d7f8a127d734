"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"RALFCKPT"
    version    uint32    FORMAT_VERSION
    config_len uint32    length of the JSON block in bytes
    config     bytes     UTF-8 JSON, keys sorted
    count      uint32    number of tensors
    count x tensor record:
        name_len uint16, name UTF-8
        dtype    uint8   0=float32 1=float64 2=int64
        ndim     uint8
        dims     ndim x uint32
        data     raw little-endian values, row-major

Files are written to a temporary sibling and renamed, so readers never see a
half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RALFCKPT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, cfg_len = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    config = json.loads(blob[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if off != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint ({len(blob) - off})")
    return tensors, config


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    atomic_write(path, dumps(tensors, config))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def stamp(tensors: dict[str, np.ndarray]) -> str:
    """Content hash of named tensors; used as the frozen-encoder version stamp."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]
