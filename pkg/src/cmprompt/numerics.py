"""Deterministic dense numeric kernels: cosine similarity, stable softmax,
nearest-rank percentiles, and counter-based random streams.

Everything here is pure and operates on plain numpy arrays. Random streams
use the Philox counter-based generator so equal seeds replay bit-identically
on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .validation import check_positive, check_vector

__all__ = [
    "DegenerateInputError",
    "cosine",
    "softmax",
    "percentile_nearest_rank",
    "l2_normalize",
    "make_rng",
    "torch_seed_from",
]


class DegenerateInputError(ValueError):
    """A numerically unusable input, e.g. a zero-norm vector fed to cosine."""


def cosine(a, b) -> float:
    """Cosine similarity a·b / (|a||b|), symmetric and scale-invariant."""
    av = check_vector(a, name="a")
    bv = check_vector(b, dim=av.shape[0], name="b")
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine undefined for zero-norm input")
    return float(np.dot(av, bv) / (na * nb))


def cosine_matrix(A, B) -> np.ndarray:
    """Pairwise cosine similarities between rows of A (n, d) and B (m, d)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("cosine undefined for zero-norm rows")
    return (A / na) @ (B / nb).T


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction for overflow safety."""
    check_positive(temperature, "temperature")
    z = check_vector(logits, name="logits") / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def percentile_nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: sort ascending, take element ceil(p/100 * n) - 1.

    p must lie in (0, 100]. No interpolation: the result is always one of the
    input values.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 1 or vals.size == 0:
        raise ValueError("percentile requires a non-empty 1-D value list")
    if not (0.0 < p <= 100.0):
        raise ValueError(f"percentile rank must lie in (0, 100], got {p}")
    s = np.sort(vals)
    # p*n first, then /100: keeps e.g. p=80, n=10 exact in floating point
    idx = int(np.ceil(p * vals.size / 100.0)) - 1
    return float(s[idx])


def l2_normalize(X) -> np.ndarray:
    """Row-wise unit normalization; raises on zero-norm rows."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        n = np.linalg.norm(arr)
        if n == 0.0:
            raise DegenerateInputError("cannot normalize a zero vector")
        return arr / n
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize zero-norm rows")
    return arr / norms


def _tag_word(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2s(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Seeded Philox stream, optionally forked by hashable tags.

    Philox is counter-based, so the stream for a given (seed, tags) is
    bit-identical across platforms and independent of draw order elsewhere.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_word(t) for t in tags]
    material = np.array(words, dtype="<u8").tobytes()
    digest = hashlib.blake2s(material, digest_size=16).digest()
    key = np.frombuffer(digest, dtype="<u8")  # Philox key is 2x64 bits
    return np.random.Generator(np.random.Philox(key=key))


def torch_seed_from(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed for a torch.Generator from a numpy stream."""
    return int(rng.integers(0, 2**63 - 1))
