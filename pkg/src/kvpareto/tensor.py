"""Dense float32 primitives used by the toy inference engine.

Tensors are plain contiguous ``numpy.float32`` arrays. The two reductions that
matter for reproducibility (matrix products and the attention value mix) use a
fixed left-to-right accumulation over the contracted axis, so every output
element depends only on its own row and column and never on how many other
rows happen to be in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEG_FILL = np.finfo(np.float32).min


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass(frozen=True)
class AttentionMask:
    """Causal mask, optionally shifted by ``offset`` previously cached tokens.

    Query row ``i`` may attend to key column ``j`` iff ``j <= i + offset``.
    """

    offset: int = 0

    def __post_init__(self):
        if self.offset < 0:
            raise ValueError(f"mask offset must be >= 0, got {self.offset}")

    @classmethod
    def causal(cls) -> "AttentionMask":
        return cls(0)

    def allowed(self, m: int, n: int) -> np.ndarray:
        rows = np.arange(m)[:, None] + self.offset
        return np.arange(n)[None, :] <= rows


def as_tensor(x, *, copy: bool = False) -> np.ndarray:
    arr = np.array(x, dtype=np.float32, order="C") if copy else np.ascontiguousarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with a fixed summation order over the inner axis.

    Leading axes are batch axes and must match exactly (no broadcasting).
    The result is bitwise identical to a naive triple loop that accumulates
    ``acc = acc + a[i, k] * b[k, j]`` in float32.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least 2-d operands")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch shapes differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    out = np.zeros(a.shape[:-2] + (m, n), dtype=np.float32)
    prod = np.empty_like(out)
    for t in range(k):
        np.multiply(a[..., :, t, None], b[..., t, None, :], out=prod)
        out += prod
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sdpa(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: AttentionMask | None = None) -> np.ndarray:
    """Scaled dot-product attention over ``(heads, tokens, head_dim)`` operands."""
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError("sdpa expects (heads, tokens, head_dim) tensors")
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise DimensionError(f"head counts differ: {q.shape[0]}, {k.shape[0]}, {v.shape[0]}")
    if q.shape[2] != k.shape[2]:
        raise DimensionError(f"query/key head_dim differ: {q.shape[2]} vs {k.shape[2]}")
    if k.shape[1] != v.shape[1]:
        raise DimensionError(f"key/value lengths differ: {k.shape[1]} vs {v.shape[1]}")
    m, n = q.shape[1], k.shape[1]
    scale = np.float32(1.0 / np.sqrt(q.shape[2]))
    scores = matmul(q, np.ascontiguousarray(k.transpose(0, 2, 1))) * scale
    if mask is not None:
        scores = np.where(mask.allowed(m, n)[None], scores, NEG_FILL)
    probs = softmax_rows(scores)
    return matmul(probs, v)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(eps))) * gain
