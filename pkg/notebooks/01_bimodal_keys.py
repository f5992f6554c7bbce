# Bimodal key activations and the sign fold.
#
# A key projection with large per-channel biases produces activations that sit
# in two clumps, one near -c and one near +c. A per-tensor uniform quantizer
# has to cover both clumps, so most of its levels land in the empty middle.
# Flipping the sign of the negative channels (and the matching query channels)
# leaves QK^T untouched and puts every channel on the same side.

import numpy as np

from agquant import (
    HistogramConfig,
    SyntheticSpec,
    apply_big,
    build_histogram,
    compute_gamma,
    discriminate_histogram,
    discriminate_kde,
    forward,
    gen_bimodal_block,
)
from agquant.quantizers import fake_quant_uniform, uniform_params_from_range

block, x_k, signs = gen_bimodal_block(SyntheticSpec(seed=0, tokens_k=128, center=8, width=1))
k = forward(block, x_k, x_k, x_k).k_act
print("key range before:", k.min(), k.max())

# both detectors should call this bimodal
cfg = HistogramConfig()
h = discriminate_histogram(build_histogram(k, cfg.n_bins), cfg)
print("histogram:", h.is_bimodal, "centers (bin index)", h.center_neg, h.center_pos, "top-k mass", round(h.mass_topk, 3))
print("kde:      ", discriminate_kde(k).is_bimodal)

# a plain normal tensor should not be
print("normal:   ", discriminate_kde(np.random.default_rng(0).standard_normal(4096)).is_bimodal)

gamma = compute_gamma(k)
print("negative channels found:", int((gamma < 0).sum()), "of", gamma.size,
      "(truth:", int((signs < 0).sum()), ")")

folded = apply_big(block, gamma)
x_q = np.random.default_rng(1).standard_normal((64, 32)).astype(np.float32)
before = forward(block, x_q, x_k, x_k)
after = forward(folded, x_q, x_k, x_k)
print("max |output change|:", np.abs(before.output - after.output).max())
print("key range after:", after.k_act.min(), after.k_act.max())


def mse6(t):
    p = uniform_params_from_range(float(t.min()), float(t.max()), 6)
    return float(np.mean((t - fake_quant_uniform(t, p)) ** 2))


print("6-bit key MSE  before %.4g  after %.4g  ratio %.2f"
      % (mse6(before.k_act), mse6(after.k_act), mse6(before.k_act) / mse6(after.k_act)))

# folding twice is the identity, bit for bit
print("involution exact:", apply_big(folded, gamma).same_as(block))
