"""Binary matrix files and structured-text indexes used for persistence.

Matrix format: magic bytes ``EMB1``, then u32 rows, u32 cols, then row-major
little-endian float32 data. The same format serves exported prototypes,
checkpointed prompt/gate parameters, and externally produced embedding
matrices that users may substitute for the toy encoder features.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


def write_matrix(path, M) -> None:
    arr = np.ascontiguousarray(np.asarray(M, dtype="<f4"))
    if arr.ndim != 2:
        raise ValueError(f"matrix files are 2-D, got shape {arr.shape}")
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(arr.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated matrix file")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(rows, cols).copy()


def write_index(path, obj) -> None:
    """Structured-text sidecar (JSON with sorted keys) next to matrix files."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_index(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
