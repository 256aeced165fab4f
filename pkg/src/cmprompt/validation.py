"""Input validation helpers shared by the estimators and numeric kernels."""

from __future__ import annotations

import numpy as np


def check_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally of fixed length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_matrix(X, cols: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally with a fixed column count."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_tokens(X, seq_len: int, vocab_size: int, name: str = "tokens") -> np.ndarray:
    """Coerce to a 2-D int64 token array and verify sequence length and vocab range.

    Accepts a single sequence (1-D) or a batch (2-D); always returns 2-D.
    """
    arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[1] != seq_len:
        raise ValueError(
            f"{name} sequence length mismatch: expected {seq_len}, got {arr.shape[1]}"
        )
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ValueError(f"{name} must contain integer token ids")
    arr = arr.astype(np.int64)
    if arr.min(initial=0) < 0 or arr.max(initial=0) >= vocab_size:
        raise ValueError(f"{name} token ids must lie in [0, {vocab_size})")
    return arr


def check_positive(value, name: str) -> None:
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
