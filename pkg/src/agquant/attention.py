"""Single-head attention blocks and seeded synthetic generators.

Randomness comes from ``numpy.random.Philox``, a counter-based generator with
a fixed, platform-independent stream, so a ``SyntheticSpec`` seed pins every
generated tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import matmul, softmax_rows

__all__ = [
    "KINDS",
    "REGIMES",
    "AttentionBlockParams",
    "AttentionTaps",
    "SyntheticSpec",
    "rng_for",
    "forward",
    "gen_block",
    "gen_bimodal_block",
    "gen_post_softmax",
    "make_toy_model",
    "sample_inputs",
    "DEFAULT_TOKENS",
]

KINDS = ("self_attention", "token_to_image", "image_to_token")
REGIMES = ("normal_key", "bimodal_key", "softmax_smooth", "softmax_peaked")

# logit standard deviations for the post-softmax regimes
SMOOTH_LOGIT_STD = 0.5
PEAKED_LOGIT_STD = 2.0

# (tokens_q, tokens_k) per attention kind in the toy model
DEFAULT_TOKENS = {
    "self_attention": (64, 64),
    "token_to_image": (8, 128),
    "image_to_token": (128, 8),
}


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & (2**64 - 1), counter=[0, 0, 0, stream]))


@dataclass(frozen=True)
class AttentionBlockParams:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    kind: str = "self_attention"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        for name in ("W_q", "W_k", "W_v", "b_q", "b_k", "b_v"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        m, n = self.W_q.shape
        if self.W_k.shape != (m, n) or self.W_v.shape != (m, n):
            raise ValueError("W_q, W_k, W_v must share one (m, n) shape")
        for name in ("b_q", "b_k", "b_v"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")

    @property
    def dims(self) -> tuple[int, int]:
        return self.W_q.shape

    def weights(self) -> dict[str, np.ndarray]:
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v}

    def same_as(self, other: "AttentionBlockParams") -> bool:
        """Bitwise equality of every parameter."""
        return self.kind == other.kind and all(
            np.array_equal(getattr(self, f).view(np.uint32), getattr(other, f).view(np.uint32))
            for f in ("W_q", "W_k", "W_v", "b_q", "b_k", "b_v")
        )


@dataclass(frozen=True)
class AttentionTaps:
    q_act: np.ndarray
    k_act: np.ndarray
    v_act: np.ndarray
    scores: np.ndarray
    attn: np.ndarray
    output: np.ndarray


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    tokens_q: int = 64
    tokens_k: int = 64
    dim: int = 32
    channels: int = 32
    regime: str = "bimodal_key"
    center: float = 8.0
    width: float = 1.0
    frac_positive: float = 0.5
    kind: str = "self_attention"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        for name in ("tokens_q", "tokens_k", "dim", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.frac_positive <= 1:
            raise ValueError(f"frac_positive must be in (0, 1], got {self.frac_positive}")
        if not self.width > 0:
            raise ValueError("width must be positive")


def forward(block: AttentionBlockParams, X_q, X_k, X_v) -> AttentionTaps:
    n = block.W_q.shape[1]
    q = matmul(X_q, block.W_q) + block.b_q
    k = matmul(X_k, block.W_k) + block.b_k
    v = matmul(X_v, block.W_v) + block.b_v
    scores = (matmul(q, k.T) / np.float32(math.sqrt(n))).astype(np.float32)
    attn = softmax_rows(scores)
    return AttentionTaps(q, k, v, scores, attn, matmul(attn, v))


def _draw_signs(rng: np.random.Generator, n: int, frac_positive: float) -> np.ndarray:
    # exact positive count, random placement
    n_pos = int(round(frac_positive * n))
    signs = -np.ones(n, dtype=np.int8)
    signs[rng.permutation(n)[:n_pos]] = 1
    return signs


def gen_block(spec: SyntheticSpec, q_gain: float = 1.5) -> tuple[AttentionBlockParams, np.ndarray]:
    """Random block for ``spec.regime``; returns the block and the channel signs.

    ``bimodal_key`` puts channel ``j`` of K near ``sign_j * center`` with spread
    ``width``; any other regime gives zero-mean keys of spread ``width``.
    """
    rng = rng_for(spec.seed, stream=1)
    m, n = spec.dim, spec.channels
    w_q = rng.standard_normal((m, n)) * (q_gain / math.sqrt(m))
    w_k = rng.standard_normal((m, n)) * (spec.width / math.sqrt(m))
    w_v = rng.standard_normal((m, n)) / math.sqrt(m)
    b_q = rng.standard_normal(n) * 0.1
    b_v = rng.standard_normal(n)
    if spec.regime == "bimodal_key":
        signs = _draw_signs(rng, n, spec.frac_positive)
        b_k = signs * spec.center
    else:
        signs = np.ones(n, dtype=np.int8)
        b_k = np.zeros(n)
    block = AttentionBlockParams(w_q, w_k, w_v, b_q, b_k, b_v, kind=spec.kind)
    return block, signs


def gen_bimodal_block(spec: SyntheticSpec) -> tuple[AttentionBlockParams, np.ndarray, np.ndarray]:
    """Bimodal-key block, key-side input ``X_k``, and ground-truth channel signs."""
    if spec.regime != "bimodal_key":
        raise ValueError("gen_bimodal_block needs the bimodal_key regime")
    block, signs = gen_block(spec)
    X_k = rng_for(spec.seed, stream=2).standard_normal((spec.tokens_k, spec.dim)).astype(np.float32)
    return block, X_k, signs


def gen_post_softmax(spec: SyntheticSpec) -> np.ndarray:
    """Softmax over Gaussian logits of shape (tokens_q, tokens_k)."""
    if spec.regime == "softmax_smooth":
        std = SMOOTH_LOGIT_STD
    elif spec.regime == "softmax_peaked":
        std = PEAKED_LOGIT_STD
    else:
        raise ValueError(f"gen_post_softmax needs a softmax regime, got {spec.regime!r}")
    logits = rng_for(spec.seed, stream=3).standard_normal((spec.tokens_q, spec.tokens_k)) * std
    return softmax_rows(logits)


# (kind, key regime) for each block of the default toy model
_TOY_LAYOUT = (
    ("self_attention", "normal_key"),
    ("self_attention", "bimodal_key"),
    ("token_to_image", "normal_key"),
    ("image_to_token", "bimodal_key"),
    ("self_attention", "bimodal_key"),
    ("self_attention", "normal_key"),
)

# score gain per kind: weak for token-to-image (flat rows), strong for image-to-token
_KIND_GAIN = {"self_attention": 1.0, "token_to_image": 0.5, "image_to_token": 2.0}


def make_toy_model(
    seed: int,
    dim: int = 32,
    channels: int = 32,
    center: float = 8.0,
    width: float = 1.0,
    frac_positive: float = 0.461,
    layout=_TOY_LAYOUT,
) -> list[AttentionBlockParams]:
    """A stack of independent attention sites mixing the three kinds."""
    blocks = []
    for i, (kind, regime) in enumerate(layout):
        spec = SyntheticSpec(
            seed=seed * 1009 + i,
            dim=dim,
            channels=channels,
            regime=regime,
            center=center,
            width=width,
            frac_positive=frac_positive,
            kind=kind,
        )
        block, _ = gen_block(spec, q_gain=_KIND_GAIN[kind])
        blocks.append(block)
    return blocks


def sample_inputs(
    model: list[AttentionBlockParams],
    seed: int,
    n_samples: int,
    tokens: dict | None = None,
) -> list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """Calibration/eval inputs: ``samples[i][site] == (X_q, X_k, X_v)``."""
    tokens = {**DEFAULT_TOKENS, **(tokens or {})}
    rng = rng_for(seed, stream=4)
    samples = []
    for _ in range(n_samples):
        sites = []
        for block in model:
            m = block.W_q.shape[0]
            t_q, t_k = tokens[block.kind]
            if block.kind == "self_attention":
                x = rng.standard_normal((t_q, m)).astype(np.float32)
                sites.append((x, x, x))
            else:
                x_q = rng.standard_normal((t_q, m)).astype(np.float32)
                x_kv = rng.standard_normal((t_k, m)).astype(np.float32)
                sites.append((x_q, x_kv, x_kv))
        samples.append(sites)
    return samples
