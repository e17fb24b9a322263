"""Binary checkpoint format.

Layout (little-endian)::

    b"ST3CKPT"                      magic
    u32  version
    u32  blob length, then UTF-8 text   canonical config + run metadata (YAML)
    u32  record count
    per record:
        u16 name length, name bytes (UTF-8)
        u8  dtype tag (1 = float32)
        u8  ndim, then ndim x u32 extents
        payload: float32 values in C order
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
import yaml

MAGIC = b"ST3CKPT"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    blob = yaml.safe_dump(meta, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 arrays are stored, got {arr.dtype}")
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<BB", 1, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not an ST3 checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4))
    meta = yaml.safe_load(bytes(take(blob_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last record")
    return arrays, meta


def save(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    tmp.replace(path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
