"""Binary checkpoint format for named parameter and state tensors.

Layout (little-endian):
  magic b"TFCK" | u32 version=1 | 32-byte sha256 of the architecture config
  JSON | u32 blob count | blobs. Each blob: u16 name length | name (utf-8) |
  u8 dtype code (0 = f32, 1 = f64, 2 = i64) | u8 ndim | u32 dims | raw data.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TFCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    """Corrupt checkpoint or architecture mismatch."""


def arch_hash(arch_json: str) -> bytes:
    return hashlib.sha256(arch_json.encode()).digest()


def save_checkpoint(path, arch_json: str, blobs: dict) -> None:
    path = Path(path)
    out = [MAGIC, struct.pack("<I", VERSION), arch_hash(arch_json),
           struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"blob {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode()
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype(_DTYPES[code]).tobytes())
    path.write_bytes(b"".join(out))


def load_checkpoint(path, expected_arch_json: str | None = None):
    """Returns (arch_hash_bytes, {name: array}). If ``expected_arch_json`` is
    given, a hash mismatch raises CheckpointError."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 44 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = raw[8:40]
    if expected_arch_json is not None and stored_hash != arch_hash(expected_arch_json):
        raise CheckpointError(
            f"{path}: checkpoint was written for a different architecture config")
    count, = struct.unpack_from("<I", raw, 40)
    off = 44
    blobs = {}
    try:
        for _ in range(count):
            name_len, = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode()
            off += name_len
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
            blobs[name] = np.frombuffer(raw, dtype, int(np.prod(shape)) if ndim else 1,
                                        off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt at offset {off}") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after blobs")
    return stored_hash, blobs
