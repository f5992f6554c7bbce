"""Bimodal detection of key activations and the sign-folding transform.

Two detectors are provided. The histogram detector sums the top-k bin
probabilities (bell-shaped mass) and requires a gap between the two clusters
of top-k bin indices. The KDE detector finds local maxima of a Gaussian
density estimate and prunes small or crowded peaks.

When a key activation tensor is bimodal, each channel sits in one peak, so a
per-channel sign vector ``gamma`` folds the negative channels onto the
positive side. Multiplying the query and key linears by the same ``gamma``
leaves ``Q @ K.T`` unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import fftconvolve

from .tensor import channel_mean, col_scale

__all__ = [
    "HistogramConfig",
    "Histogram",
    "BimodalVerdict",
    "KdeConfig",
    "build_histogram",
    "discriminate_histogram",
    "discriminate_kde",
    "kde_density",
    "compute_gamma",
    "apply_big",
]


@dataclass(frozen=True)
class HistogramConfig:
    n_bins: int = 128
    top_k: int = 16
    theta: float = 0.3
    eta: float = 0.2

    def __post_init__(self):
        if self.n_bins < 1 or self.top_k < 1:
            raise ValueError("n_bins and top_k must be positive")
        if self.top_k > self.n_bins:
            raise ValueError(f"top_k={self.top_k} exceeds n_bins={self.n_bins}")
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if not 0 < self.eta < 1:
            raise ValueError(f"eta must be in (0, 1), got {self.eta}")


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    probs: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class BimodalVerdict:
    """Detector output. Centers and radii are in bin (or grid) index units."""

    is_bimodal: bool
    center_neg: float
    center_pos: float
    radius_neg: float
    radius_pos: float
    mass_topk: float
    method: str = "histogram"
    reason: str = ""

    def to_dict(self) -> dict:
        """Plain dict; NaN fields become ``None``."""

        def num(v):
            v = float(v)
            return None if v != v else v

        return {
            "is_bimodal": bool(self.is_bimodal),
            "method": self.method,
            "center_neg": num(self.center_neg),
            "center_pos": num(self.center_pos),
            "radius_neg": num(self.radius_neg),
            "radius_pos": num(self.radius_pos),
            "mass_topk": num(self.mass_topk),
            "reason": self.reason,
        }


@dataclass(frozen=True)
class KdeConfig:
    grid_points: int = 512
    min_height_frac: float = 0.1
    min_separation_frac: float = 0.25
    max_valley_frac: float = 0.5

    def __post_init__(self):
        if self.grid_points < 3:
            raise ValueError("grid_points must be at least 3")
        for name in ("min_height_frac", "min_separation_frac", "max_valley_frac"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must be in (0, 1), got {v}")


def _widened_range(x: np.ndarray) -> tuple[float, float]:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        # one ULP is not enough room for N+1 distinct edges
        pad = max(abs(lo), 1.0) * 1e-6
        lo, hi = lo - pad, hi + pad
    return lo, hi


def build_histogram(x, n_bins: int) -> Histogram:
    """Equal-width bins ``[x0, x1], (x1, x2], ..., (x_{n-1}, x_n]`` over the data range."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot build a histogram of an empty tensor")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    lo, hi = _widened_range(x)
    edges = lo + (hi - lo) * np.arange(n_bins + 1) / n_bins
    edges[-1] = hi
    idx = np.clip(np.searchsorted(edges, x, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return Histogram(edges=edges, probs=counts / x.size)


def _not_bimodal(mass: float, method: str, reason: str) -> BimodalVerdict:
    nan = float("nan")
    return BimodalVerdict(False, nan, nan, nan, nan, mass, method, reason)


def discriminate_histogram(h: Histogram, cfg: HistogramConfig = HistogramConfig()) -> BimodalVerdict:
    n = h.n_bins
    if cfg.top_k > n:
        raise ValueError(f"top_k={cfg.top_k} exceeds {n} bins")
    order = np.argsort(-h.probs, kind="stable")[: cfg.top_k]
    mass = float(h.probs[order].sum())
    if np.count_nonzero(h.probs) < cfg.top_k:
        return _not_bimodal(mass, "histogram", "fewer nonempty bins than top_k")
    if cfg.top_k < 2:
        return _not_bimodal(mass, "histogram", "top_k < 2 cannot form two clusters")

    idx = np.sort(order).astype(np.float64)
    cut = int(np.argmax(np.diff(idx))) + 1
    neg, pos = idx[:cut], idx[cut:]
    c_neg, c_pos = float(neg.mean()), float(pos.mean())
    r_neg = float(np.abs(neg - c_neg).max())
    r_pos = float(np.abs(pos - c_pos).max())
    gap = abs(c_pos - c_neg) - (r_pos + r_neg)

    bell = mass >= cfg.theta
    void = gap >= cfg.eta * n
    reasons = []
    if not bell:
        reasons.append(f"top-k mass {mass:.4f} < theta")
    if not void:
        reasons.append(f"cluster gap {gap:.2f} < eta*N")
    return BimodalVerdict(bell and void, c_neg, c_pos, r_neg, r_pos, mass, "histogram", "; ".join(reasons))


def kde_density(x, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian KDE on a uniform grid via linear binning and FFT convolution."""
    x = np.asarray(x, dtype=np.float64).ravel()
    g = len(grid)
    step = grid[1] - grid[0]
    pos = (x - grid[0]) / step
    left = np.clip(np.floor(pos).astype(np.int64), 0, g - 2)
    frac = np.clip(pos - left, 0.0, 1.0)
    counts = np.bincount(left, weights=1.0 - frac, minlength=g) + np.bincount(
        left + 1, weights=frac, minlength=g
    )
    half = min(int(np.ceil(5 * bandwidth / step)), 4 * g)
    offsets = np.arange(-half, half + 1) * step
    kernel = np.exp(-0.5 * (offsets / bandwidth) ** 2) / (bandwidth * np.sqrt(2 * np.pi))
    dens = fftconvolve(counts, kernel, mode="full")[half : half + g]
    return np.maximum(dens, 0.0) / x.size


def _local_maxima(d: np.ndarray) -> np.ndarray:
    # strict rise on the left, non-strict on the right so plateaus count once
    left = d[1:-1] > d[:-2]
    right = d[1:-1] >= d[2:]
    return np.flatnonzero(left & right) + 1


def _prune_peaks(peaks: list[int], heights: np.ndarray, min_dist: float) -> list[int]:
    peaks = sorted(peaks)
    while True:
        crowded = [
            p for p in peaks if any(q != p and abs(q - p) < min_dist for q in peaks)
        ]
        if not crowded:
            return peaks
        # smallest crowded peak goes first
        peaks.remove(min(crowded, key=lambda p: (heights[p], p)))


def _half_width(d: np.ndarray, peak: int) -> float:
    half = d[peak] / 2
    lo = peak
    while lo > 0 and d[lo - 1] >= half:
        lo -= 1
    hi = peak
    while hi < len(d) - 1 and d[hi + 1] >= half:
        hi += 1
    return (hi - lo) / 2


def discriminate_kde(x, cfg: KdeConfig = KdeConfig()) -> BimodalVerdict:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2 or x.min() == x.max():
        return _not_bimodal(float("nan"), "kde", "fewer than two distinct values")
    lo, hi = float(x.min()), float(x.max())
    grid = np.linspace(lo, hi, cfg.grid_points)
    step = grid[1] - grid[0]
    bw = float(x.std()) * x.size ** (-0.2)
    dens = kde_density(x, grid, bw)

    peaks = [int(p) for p in _local_maxima(dens) if dens[p] >= cfg.min_height_frac * dens.max()]
    peaks = _prune_peaks(peaks, dens, cfg.min_separation_frac * (hi - lo) / step)
    mass = float(dens.sum() * step)
    if len(peaks) != 2:
        return _not_bimodal(mass, "kde", f"{len(peaks)} peak(s) after pruning")

    p_neg, p_pos = peaks
    mid = float((dens * np.arange(len(dens))).sum() / dens.sum())
    r_neg, r_pos = _half_width(dens, p_neg), _half_width(dens, p_pos)
    valley = float(dens[p_neg : p_pos + 1].min())
    straddles = p_neg < mid < p_pos
    hollow = valley <= cfg.max_valley_frac * min(dens[p_neg], dens[p_pos])
    reasons = []
    if not straddles:
        reasons.append("both peaks on one side of the density midpoint")
    if not hollow:
        reasons.append("no void between peaks")
    return BimodalVerdict(
        straddles and hollow, float(p_neg), float(p_pos), r_neg, r_pos, mass, "kde", "; ".join(reasons)
    )


def compute_gamma(k_act) -> np.ndarray:
    """Channel signs of the key activations: +1 where the column mean is >= 0."""
    k_act = np.asarray(k_act)
    if k_act.size == 0:
        raise ValueError("empty key activations")
    return np.where(channel_mean(k_act) >= 0, 1, -1).astype(np.int8)


def apply_big(block, gamma):
    """Fold ``gamma`` into the query and key linears. Returns a new block."""
    gamma = np.asarray(gamma)
    n = block.W_k.shape[1]
    if gamma.shape != (n,) or block.W_q.shape[1] != n:
        raise ValueError(f"gamma of shape {gamma.shape} does not match {n} channels")
    if not np.all(np.abs(gamma) == 1):
        raise ValueError("gamma entries must be +1 or -1")
    g = gamma.astype(np.float32)
    return replace(
        block,
        W_q=col_scale(block.W_q, g),
        b_q=(block.b_q * g).astype(np.float32),
        W_k=col_scale(block.W_k, g),
        b_k=(block.b_k * g).astype(np.float32),
    )
