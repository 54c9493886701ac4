"""Dense numeric core: float32 matrices, stable softmax, and single-query
scaled dot-product attention.

Cache contents are stored as float32 row-major matrices; attention math runs
in float64 so that results are insensitive to summation order (row
permutations of K/V must reproduce the same output to tight tolerance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# 2-D float32 array, shape (rows, cols), row-major.
Matrix = np.ndarray


def as_matrix(data, rows: int, cols: int, name: str = "matrix") -> Matrix:
    """Build a validated ``rows x cols`` float32 matrix from a flat buffer.

    Raises ValueError if the element count is wrong or any entry is
    non-finite; the error names the offending (row, col).
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.size != rows * cols:
        raise ValueError(
            f"{name}: buffer has {arr.size} elements, expected {rows}x{cols}={rows * cols}"
        )
    arr = arr.reshape(rows, cols)
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "matrix") -> None:
    """Raise ValueError naming the first non-finite entry, if any."""
    finite = np.isfinite(arr)
    if not finite.all():
        flat = int(np.argmin(finite.ravel()))
        r, c = divmod(flat, arr.shape[-1]) if arr.ndim > 1 else (0, flat)
        raise ValueError(f"{name}: non-finite value at ({r}, {c})")


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and scaling parameters for single-query attention.

    ``scale=None`` selects the conventional ``1/sqrt(head_dim)``; pass
    ``scale=1.0`` for the unscaled dot-product variant.  ``causal`` is
    descriptive only: decode replay always attends over the full stored
    prefix, which is exactly the causal mask for a single trailing query.
    """

    head_dim: int
    scale: float | None = None
    causal: bool = True

    def __post_init__(self) -> None:
        if self.head_dim < 1:
            raise ValueError(f"head_dim must be >= 1, got {self.head_dim}")
        if self.scale is not None and not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    @property
    def effective_scale(self) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(self.head_dim)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtraction), float64 output.

    Output entries lie in [0, 1] and sum to 1.
    """
    x = np.asarray(logits, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty logits")
    if not np.isfinite(x).all():
        raise ValueError("softmax: non-finite logit")
    x = x - x.max()
    e = np.exp(x)
    return e / e.sum()


def attention(q, k, v, cfg: AttentionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Single-query attention over N stored tokens.

    Args:
        q: query, shape (head_dim,) or (1, head_dim).
        k: keys, shape (N, head_dim).
        v: values, shape (N, head_dim).
        cfg: head_dim and logit scale.

    Returns:
        (dist, out): the attention distribution over the N rows (length N,
        sums to 1) and the attended output (length head_dim).  Both are
        returned so callers can inspect the distribution directly.
    """
    d = cfg.head_dim
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[0] != d:
        raise ValueError(f"q: expected {d} columns, got {q.shape[0]}")
    if k.ndim != 2 or k.shape[1] != d:
        raise ValueError(f"k: expected shape (N, {d}), got {k.shape}")
    if v.ndim != 2 or v.shape[1] != d:
        raise ValueError(f"v: expected shape (N, {d}), got {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"v: expected {k.shape[0]} rows to match k, got {v.shape[0]}")
    if k.shape[0] < 1:
        raise ValueError("k: need at least one row")

    logits = cfg.effective_scale * (k @ q)
    dist = softmax(logits)
    out = dist @ v
    return dist, out
