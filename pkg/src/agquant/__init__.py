"""Post-training quantization for attention blocks with bimodal keys.

Subpackages by concern:

- ``tensor``: float32 helpers (matmul, channel means, row softmax).
- ``quantizers``: uniform, log2 and adaptive-granularity quantizers, LUT path.
- ``bimodal``: histogram/KDE bimodality detectors and sign folding.
- ``attention``: toy attention blocks and seeded generators.
- ``calibration``: the calibration pipeline, tau search, error accounting.
- ``fileio``: tensor container, INI run config, reports.
"""

from .attention import (
    AttentionBlockParams,
    AttentionTaps,
    SyntheticSpec,
    forward,
    gen_bimodal_block,
    gen_post_softmax,
    make_toy_model,
    sample_inputs,
)
from .bimodal import (
    BimodalVerdict,
    HistogramConfig,
    KdeConfig,
    apply_big,
    build_histogram,
    compute_gamma,
    discriminate_histogram,
    discriminate_kde,
)
from .calibration import (
    CalibrationConfig,
    CalibrationReport,
    QuantizedModel,
    calibrate,
    flops_storage_estimate,
    quant_error_report,
    run_ablation,
    search_tau,
)
from .quantizers import (
    AgqLut,
    AgqParams,
    Log2Params,
    UniformParams,
    agq_decompose,
    agq_dequant,
    agq_matmul_lut,
    agq_quant,
    build_lut,
    log2_dequant,
    log2_quant,
    uniform_dequant,
    uniform_params_from_range,
    uniform_quant,
)
from .tensor import IntTensor

__version__ = "0.1.0"
