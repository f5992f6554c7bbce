"""Uniform, log2 and adaptive-granularity (AGQ) quantizers.

AGQ quantizes post-softmax attention with base ``2**(1/tau)``. Because
``tau`` is a power of two, a dequantized product ``a_hat * v_hat`` splits into
an integer right shift of the value code and one of ``tau`` fractional
factors, which :func:`build_lut` tabulates. :func:`agq_matmul_lut` evaluates
attention-times-value through that table.

Rounding is half-to-even throughout (``numpy.rint``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import IntTensor

__all__ = [
    "TAU_CANDIDATES",
    "UniformParams",
    "PerChannelUniformParams",
    "Log2Params",
    "AgqParams",
    "AgqLut",
    "uniform_params_from_range",
    "per_channel_params",
    "uniform_quant",
    "uniform_dequant",
    "fake_quant_uniform",
    "fake_quant_per_channel",
    "log2_quant",
    "log2_dequant",
    "agq_quant",
    "agq_dequant",
    "agq_decompose",
    "build_lut",
    "agq_matmul_lut",
]

TAU_CANDIDATES = (1, 2, 4)


def _check_bits(bits: int) -> None:
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")


@dataclass(frozen=True)
class UniformParams:
    scale: float
    zero_point: int
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not 0 <= self.zero_point <= (1 << self.bits) - 1:
            raise ValueError(f"zero point {self.zero_point} outside {self.bits}-bit range")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class PerChannelUniformParams:
    """One :class:`UniformParams` per output channel (weight column)."""

    channels: tuple[UniformParams, ...]

    def __post_init__(self):
        if not self.channels:
            raise ValueError("need at least one channel")
        object.__setattr__(self, "channels", tuple(self.channels))
        if len({p.bits for p in self.channels}) != 1:
            raise ValueError("all channels must share one bit-width")

    @property
    def count(self) -> int:
        return len(self.channels)

    @property
    def bits(self) -> int:
        return self.channels[0].bits

    @property
    def scales(self) -> np.ndarray:
        return np.array([p.scale for p in self.channels], dtype=np.float64)

    @property
    def zero_points(self) -> np.ndarray:
        return np.array([p.zero_point for p in self.channels], dtype=np.int64)


@dataclass(frozen=True)
class Log2Params:
    scale: float
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")


@dataclass(frozen=True)
class AgqParams:
    scale: float
    bits: int
    tau: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.tau < 1 or self.tau & (self.tau - 1):
            raise ValueError(f"tau must be a power of two, got {self.tau}")


@dataclass(frozen=True)
class AgqLut:
    """``entries[r, u] = 2**(r/tau) * u`` stored as float32."""

    tau: int
    bits: int
    entries: np.ndarray

    @property
    def nbytes(self) -> int:
        return int(self.entries.nbytes)


def uniform_params_from_range(min_val: float, max_val: float, bits: int) -> UniformParams:
    """Asymmetric min/max calibration.

    The range is first extended to contain zero so the zero point stays on the
    integer grid; a range that is still empty is widened by machine epsilon.
    """
    _check_bits(bits)
    if not (math.isfinite(min_val) and math.isfinite(max_val)):
        raise ValueError("range bounds must be finite")
    if max_val < min_val:
        raise ValueError(f"max {max_val} < min {min_val}")
    lo = min(float(min_val), 0.0)
    hi = max(float(max_val), 0.0)
    if hi == lo:
        eps = float(np.finfo(np.float32).eps)
        lo, hi = lo - eps, hi + eps
    qmax = (1 << bits) - 1
    scale = (hi - lo) / qmax
    zero_point = int(np.clip(np.rint(-lo / scale), 0, qmax))
    return UniformParams(scale=scale, zero_point=zero_point, bits=bits)


def per_channel_params(w, bits: int) -> PerChannelUniformParams:
    """Per-column asymmetric params for a weight matrix of shape (in, out)."""
    w = np.asarray(w)
    lo = w.min(axis=0)
    hi = w.max(axis=0)
    return PerChannelUniformParams(
        tuple(uniform_params_from_range(float(a), float(b), bits) for a, b in zip(lo, hi))
    )


def uniform_quant(x, p: UniformParams) -> IntTensor:
    x = np.asarray(x, dtype=np.float64)
    q = np.clip(np.rint(x / p.scale) + p.zero_point, 0, p.qmax)
    return IntTensor(q.astype(np.uint8), p.bits)


def uniform_dequant(q, p: UniformParams) -> np.ndarray:
    codes = q.data if isinstance(q, IntTensor) else np.asarray(q)
    return (p.scale * (codes.astype(np.float64) - p.zero_point)).astype(np.float32)


def fake_quant_uniform(x, p: UniformParams) -> np.ndarray:
    return uniform_dequant(uniform_quant(x, p), p)


def fake_quant_per_channel(w, p: PerChannelUniformParams) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != p.count:
        raise ValueError(f"weight has {w.shape[-1]} channels, params have {p.count}")
    s = p.scales
    z = p.zero_points
    qmax = (1 << p.bits) - 1
    q = np.clip(np.rint(w / s) + z, 0, qmax)
    return (s * (q - z)).astype(np.float32)


def log2_quant(x, p: Log2Params) -> IntTensor:
    x = np.asarray(x, dtype=np.float64)
    qmax = (1 << p.bits) - 1
    pos = x > 0
    codes = np.full(x.shape, float(qmax))
    with np.errstate(divide="ignore"):
        codes[pos] = np.rint(-np.log2(x[pos] / p.scale))
    return IntTensor(np.clip(codes, 0, qmax).astype(np.uint8), p.bits)


def log2_dequant(q, p: Log2Params) -> np.ndarray:
    codes = q.data if isinstance(q, IntTensor) else np.asarray(q)
    return (p.scale * np.ldexp(1.0, -codes.astype(np.int64))).astype(np.float32)


def agq_quant(a, p: AgqParams) -> IntTensor:
    """Codes ``clamp(rint(-tau * log2(a / s)), 0, 2**k - 1)``; ``a <= 0`` maps to the last code."""
    a = np.asarray(a, dtype=np.float64)
    qmax = (1 << p.bits) - 1
    pos = a > 0
    codes = np.full(a.shape, float(qmax))
    codes[pos] = np.rint(-(p.tau * np.log2(a[pos] / p.scale)))
    return IntTensor(np.clip(codes, 0, qmax).astype(np.uint8), p.bits)


def agq_dequant(q, p: AgqParams) -> np.ndarray:
    codes = q.data if isinstance(q, IntTensor) else np.asarray(q)
    return (p.scale * np.exp2(-codes.astype(np.float64) / p.tau)).astype(np.float32)


def agq_decompose(a_q: int, tau: int) -> tuple[int, int]:
    """Split ``-a_q/tau`` into ``-shift + residue/tau`` with ``0 <= residue < tau``."""
    if a_q < 0 or tau < 1:
        raise ValueError("need a_q >= 0 and tau >= 1")
    return -((-a_q) // tau), (-a_q) % tau


def build_lut(tau: int, bits: int) -> AgqLut:
    _check_bits(bits)
    if tau < 1 or tau & (tau - 1):
        raise ValueError(f"tau must be a power of two, got {tau}")
    r = np.arange(tau, dtype=np.float64)[:, None]
    u = np.arange(1 << bits, dtype=np.float64)[None, :]
    entries = (np.exp2(r / tau) * u).astype(np.float32)
    entries.setflags(write=False)
    return AgqLut(tau=tau, bits=bits, entries=entries)


def agq_matmul_lut(
    a_q: IntTensor,
    v_q: IntTensor,
    lut: AgqLut,
    s_a: float,
    s_v: float,
    v_zero: int,
    mode: str = "exact",
    tau: int | None = None,
) -> np.ndarray:
    """Attention-times-value through the residue lookup table.

    ``exact`` keeps the fractional bits of the shifted value, so it matches the
    float dequantize-then-multiply path. ``hardware`` right-shifts the
    zero-centred value magnitude (truncation toward zero) and indexes the table
    with the integer result.
    """
    if tau is not None and tau != lut.tau:
        raise ValueError(f"lut built for tau={lut.tau}, got tau={tau}")
    if a_q.bits != lut.bits or v_q.bits != lut.bits:
        raise ValueError(f"lut built for {lut.bits} bits, got a={a_q.bits}, v={v_q.bits}")
    a = a_q.data.astype(np.int64)
    v = v_q.data.astype(np.int64)
    if a.ndim != 2 or v.ndim != 2 or a.shape[1] != v.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {v.shape}")

    t = lut.tau
    shift = -((-a) // t)
    residue = (-a) % t
    centred = v - v_zero
    table = lut.entries.astype(np.float64)

    if mode == "exact":
        factor = table[residue, 1] * np.ldexp(1.0, -shift)
        out = factor @ centred.astype(np.float64)
    elif mode == "hardware":
        sign = np.sign(centred)
        mag = np.abs(centred)
        out = np.empty((a.shape[0], v.shape[1]), dtype=np.float64)
        for i in range(a.shape[0]):
            shifted = mag >> np.minimum(shift[i], 62)[:, None]
            out[i] = (sign * table[residue[i][:, None], shifted]).sum(axis=0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return (s_a * s_v * out).astype(np.float32)
