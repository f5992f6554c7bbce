"""Dense float32 tensor helpers shared by the quantizers, detectors and simulator.

Tensors are plain ``numpy.ndarray`` objects with dtype float32. Reductions
accumulate in float64 and round back to float32 once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "IntTensor",
    "as_tensor",
    "matmul",
    "channel_mean",
    "frobenius_sq",
    "minmax",
    "col_scale",
    "softmax_rows",
]


@dataclass(frozen=True)
class IntTensor:
    """Unsigned integer codes produced by a ``bits``-wide quantizer."""

    data: np.ndarray
    bits: int

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        data = np.asarray(self.data)
        if data.size and (data.min() < 0 or data.max() > (1 << self.bits) - 1):
            raise ValueError(f"codes out of range for {self.bits}-bit tensor")
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def as_tensor(x) -> np.ndarray:
    """Convert to a finite float32 array."""
    arr = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _rank2(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be rank-2, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = _rank2(a, "a")
    b = _rank2(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def channel_mean(m) -> np.ndarray:
    """Per-column arithmetic mean of a rank-2 tensor."""
    m = _rank2(m, "m")
    if m.shape[0] == 0:
        raise ValueError("channel_mean of a tensor with zero rows")
    return m.astype(np.float64).mean(axis=0).astype(np.float32)


def frobenius_sq(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.dot(d.ravel(), d.ravel()))


def minmax(x) -> tuple[float, float]:
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("minmax of an empty tensor")
    return float(x.min()), float(x.max())


def col_scale(m, v) -> np.ndarray:
    """Multiply column ``j`` of ``m`` by ``v[j]``."""
    m = _rank2(m, "m")
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] != m.shape[1]:
        raise ValueError(f"scale vector of shape {v.shape} does not match {m.shape[1]} columns")
    return (m * v.astype(m.dtype)[None, :]).astype(m.dtype, copy=False)


def softmax_rows(m) -> np.ndarray:
    m = _rank2(m, "m")
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax input contains non-finite values")
    z = m.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
