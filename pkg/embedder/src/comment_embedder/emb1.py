"""EMB1 byte format: magic ``EMB1`` | u32 N | u32 d | N x u64 row ids |
N*d float32 row-major values, all little-endian."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"


def write_emb1(values: np.ndarray, row_ids: np.ndarray, path: str | os.PathLike) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    row_ids = np.ascontiguousarray(row_ids, dtype="<u8")
    if values.ndim != 2 or row_ids.shape != (values.shape[0],):
        raise ValueError(f"bad shapes: values {values.shape}, row_ids {row_ids.shape}")
    path = Path(path)
    payload = struct.pack("<4sII", MAGIC, values.shape[0], values.shape[1]) + row_ids.tobytes() + values.tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_emb1(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read back (values, row_ids); used for post-write verification."""
    data = Path(path).read_bytes()
    magic, n, d = struct.unpack_from("<4sII", data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = 12 + 8 * n + 4 * n * d
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {n}x{d}, got {len(data)}")
    row_ids = np.frombuffer(data, dtype="<u8", count=n, offset=12).copy()
    values = np.frombuffer(data, dtype="<f4", count=n * d, offset=12 + 8 * n).reshape(n, d).copy()
    return values, row_ids
