# Adaptive-granularity log quantization of attention probabilities.
#
# A log2 quantizer spends its levels on powers of two. With base 2^(1/tau) the
# grid gets tau times denser near 1, where peaked attention rows put their big
# entries. Each code splits into a shift and a residue, so A @ V needs only a
# small table of 2^(r/tau) * u products plus right shifts.

import numpy as np

from agquant import SyntheticSpec, gen_post_softmax, search_tau
from agquant.attention import rng_for
from agquant.quantizers import (
    AgqParams,
    Log2Params,
    agq_decompose,
    agq_dequant,
    agq_matmul_lut,
    agq_quant,
    build_lut,
    log2_quant,
    uniform_params_from_range,
    uniform_quant,
)

a = gen_post_softmax(SyntheticSpec(seed=0, tokens_q=4, tokens_k=8, regime="softmax_peaked"))
print("one attention row:", np.round(a[0], 4))

for tau in (1, 2, 4):
    p = AgqParams(scale=1.0, bits=4, tau=tau)
    q = agq_quant(a, p)
    print(f"tau={tau} codes {q.data[0]}  recon {np.round(agq_dequant(q, p)[0], 4)}")

# tau=1 is the ordinary log2 quantizer
p1 = AgqParams(scale=1.0, bits=4, tau=1)
print("tau=1 matches log2:", np.array_equal(agq_quant(a, p1).data, log2_quant(a, Log2Params(1.0, 4)).data))

# code 7 with tau=4: one right shift of 2, residue 1
print("decompose(7, 4):", agq_decompose(7, 4))

lut = build_lut(4, 8)
print("tau=4, 8-bit LUT:", lut.entries.shape, lut.entries.size, "entries,", lut.nbytes, "bytes")

# LUT matmul vs the float path
v = rng_for(0, 1).standard_normal((8, 16)).astype(np.float32)
pv = uniform_params_from_range(float(v.min()), float(v.max()), 8)
pa = AgqParams(scale=1.0, bits=8, tau=4)
a_q, v_q = agq_quant(a, pa), uniform_quant(v, pv)
ref = agq_dequant(a_q, pa) @ ((v_q.data.astype(np.float64) - pv.zero_point) * pv.scale)
for mode in ("exact", "hardware"):
    got = agq_matmul_lut(a_q, v_q, lut, 1.0, pv.scale, pv.zero_point, mode=mode)
    print(f"{mode:8s} rel error {np.linalg.norm(got - ref) / np.linalg.norm(ref):.2e}")

# flat rows like coarse grids, peaked rows like fine ones
for regime, shape in (("softmax_smooth", (8, 4096)), ("softmax_peaked", (64, 8))):
    picks = []
    for seed in range(10):
        att = gen_post_softmax(SyntheticSpec(seed=seed, tokens_q=shape[0], tokens_k=shape[1], regime=regime))
        vals = rng_for(seed, 5).standard_normal((shape[1], 16)).astype(np.float32)
        picks.append(search_tau([att], [vals], (1, 2, 4), bits=4)[0])
    print(regime, "picked tau:", picks)
