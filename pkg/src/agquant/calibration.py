"""Calibration pipeline: sign folding on the first sample, min/max (or MSE-grid)
scale fitting, and per-site selection of the AGQ granularity ``tau``.

``tau`` is chosen by accumulating, over the calibration set, the squared
Frobenius error of the attention-times-value product when only the attention
map is quantized, and taking the argmin (ties go to the smaller ``tau``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bimodal
from .attention import DEFAULT_TOKENS, AttentionBlockParams, AttentionTaps, forward
from .bimodal import BimodalVerdict, HistogramConfig, KdeConfig
from .quantizers import (
    AgqParams,
    PerChannelUniformParams,
    UniformParams,
    agq_dequant,
    agq_matmul_lut,
    agq_quant,
    build_lut,
    fake_quant_per_channel,
    fake_quant_uniform,
    per_channel_params,
    uniform_params_from_range,
    uniform_quant,
)
from .tensor import frobenius_sq, matmul, softmax_rows

__all__ = [
    "CalibrationConfig",
    "TauSearchState",
    "SiteQuant",
    "QuantizedModel",
    "CalibrationReport",
    "calibrate",
    "search_tau",
    "quantized_forward",
    "quant_error_report",
    "flops_storage_estimate",
    "run_ablation",
]

ACT_TENSORS = ("x_q", "x_k", "x_v", "q", "k", "v")
MSE_GRID_POINTS = 100
BIT_COST = {4: 1 / 8, 6: 6 / 32, 8: 8 / 32, 32: 1.0}


@dataclass(frozen=True)
class CalibrationConfig:
    weight_bits: int = 6
    act_bits: int = 6
    tau_candidates: tuple[int, ...] = (1, 2, 4)
    scale_init: str = "minmax"
    num_samples: int = 32
    big_enabled: bool = True
    agq_enabled: bool = True
    skip_first_last: bool = True
    detector: str = "histogram"
    agq_scale: str = "unit"
    quantize_values_in_search: bool = False
    histogram: HistogramConfig = field(default_factory=HistogramConfig)
    kde: KdeConfig = field(default_factory=KdeConfig)

    def __post_init__(self):
        object.__setattr__(self, "tau_candidates", tuple(sorted(set(self.tau_candidates))))
        if not self.tau_candidates:
            raise ValueError("tau_candidates must be nonempty")
        for t in self.tau_candidates:
            if t < 1 or t & (t - 1):
                raise ValueError(f"tau candidates must be powers of two, got {t}")
        for name in ("weight_bits", "act_bits"):
            if not 2 <= getattr(self, name) <= 8:
                raise ValueError(f"{name} must be in [2, 8]")
        if self.scale_init not in ("minmax", "mse_grid"):
            raise ValueError(f"unknown scale_init {self.scale_init!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        if self.detector not in ("histogram", "kde"):
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.agq_scale not in ("unit", "running_max"):
            raise ValueError(f"unknown agq_scale {self.agq_scale!r}")


class TauSearchState:
    """Running per-site, per-``tau`` error sums (float64)."""

    def __init__(self, candidates):
        self.candidates = tuple(candidates)
        self.errors: dict[int, dict[int, float]] = {}
        self.samples_seen = 0

    def add(self, site: int, attn, values, scale: float, bits: int) -> None:
        errs = self.errors.setdefault(site, {t: 0.0 for t in self.candidates})
        for t, e in _tau_errors(attn, values, self.candidates, bits, scale).items():
            errs[t] += e

    def best(self, site: int) -> int:
        errs = self.errors[site]
        return min(self.candidates, key=lambda t: (errs[t], t))


def _tau_errors(attn, values, candidates, bits, scale) -> dict[int, float]:
    ref = matmul(attn, values)
    out = {}
    for t in candidates:
        p = AgqParams(scale, bits, t)
        out[t] = frobenius_sq(ref, matmul(agq_dequant(agq_quant(attn, p), p), values))
    return out


def search_tau(attn_samples, value_samples, candidates=(1, 2, 4), bits=4, s_a=1.0):
    """Return ``(tau, {tau: summed error})`` for paired attention/value samples."""
    if not attn_samples or len(attn_samples) != len(value_samples):
        raise ValueError("need a nonempty list of paired attention and value samples")
    state = TauSearchState(sorted(set(candidates)))
    for a, v in zip(attn_samples, value_samples):
        state.add(0, a, v, s_a, bits)
    return state.best(0), dict(state.errors[0])


@dataclass(frozen=True)
class SiteQuant:
    weights: dict[str, PerChannelUniformParams]
    acts: dict[str, UniformParams]
    attn: AgqParams | UniformParams


@dataclass
class QuantizedModel:
    blocks: list[AttentionBlockParams]
    sites: dict[int, SiteQuant]
    verdicts: dict[int, BimodalVerdict]
    gammas: dict[int, np.ndarray]
    config: CalibrationConfig

    @property
    def taus(self) -> dict[int, int]:
        return {i: s.attn.tau for i, s in self.sites.items() if isinstance(s.attn, AgqParams)}


@dataclass
class CalibrationReport:
    sites: list[dict]
    model: dict

    def to_dict(self) -> dict:
        return {"model": self.model, "sites": self.sites}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        return cls(sites=list(d["sites"]), model=dict(d["model"]))


def _quantized_sites(n_blocks: int, skip_first_last: bool) -> list[int]:
    if not skip_first_last:
        return list(range(n_blocks))
    return list(range(1, n_blocks - 1))


def _detect(k_act, cfg: CalibrationConfig) -> BimodalVerdict:
    if cfg.detector == "kde":
        return bimodal.discriminate_kde(k_act, cfg.kde)
    h = bimodal.build_histogram(k_act, cfg.histogram.n_bins)
    return bimodal.discriminate_histogram(h, cfg.histogram)


def _all_taps(taps: AttentionTaps, xs) -> dict[str, np.ndarray]:
    x_q, x_k, x_v = xs
    return {
        "x_q": x_q,
        "x_k": x_k,
        "x_v": x_v,
        "q": taps.q_act,
        "k": taps.k_act,
        "v": taps.v_act,
        "attn": taps.attn,
    }


def _check_sample(sample, model) -> None:
    if len(sample) != len(model):
        raise ValueError(f"sample has {len(sample)} sites, model has {len(model)}")
    for block, (x_q, x_k, x_v) in zip(model, sample):
        m = block.W_q.shape[0]
        if x_q.shape[-1] != m or x_k.shape[-1] != m or x_v.shape[-1] != m:
            raise ValueError(f"input width does not match block input dimension {m}")
        if x_k.shape[0] != x_v.shape[0]:
            raise ValueError("key and value inputs need the same token count")


def _mse_grid_params(tensors, lo: float, hi: float, bits: int) -> UniformParams:
    best = None
    for c in np.linspace(0.5, 1.0, MSE_GRID_POINTS):
        p = uniform_params_from_range(c * lo, c * hi, bits)
        err = sum(frobenius_sq(t, fake_quant_uniform(t, p)) for t in tensors)
        if best is None or err < best[0]:
            best = (err, p)
    return best[1]


def calibrate(model, calib, cfg: CalibrationConfig = CalibrationConfig()):
    """Calibrate ``model`` (list of blocks) on ``calib`` (list of per-site input triples).

    Only the first ``cfg.num_samples`` samples are used. Returns
    ``(QuantizedModel, CalibrationReport)``.
    """
    if not calib:
        raise ValueError("empty calibration set")
    calib = calib[: cfg.num_samples]
    for sample in calib:
        _check_sample(sample, model)
    blocks = list(model)
    n_blocks = len(blocks)

    # sign folding from the first sample only
    verdicts: dict[int, BimodalVerdict] = {}
    gammas: dict[int, np.ndarray] = {}
    for i, (block, xs) in enumerate(zip(blocks, calib[0])):
        k_act = forward(block, *xs).k_act
        verdicts[i] = _detect(k_act, cfg)
        if cfg.big_enabled and verdicts[i].is_bimodal:
            gammas[i] = bimodal.compute_gamma(k_act)
            blocks[i] = bimodal.apply_big(block, gammas[i])

    qsites = _quantized_sites(n_blocks, cfg.skip_first_last)
    ranges = {i: {} for i in qsites}
    attn_max = {i: 0.0 for i in qsites}
    for sample in calib:
        for i in qsites:
            taps = forward(blocks[i], *sample[i])
            for name, t in _all_taps(taps, sample[i]).items():
                lo, hi = float(t.min()), float(t.max())
                old = ranges[i].get(name)
                ranges[i][name] = (lo, hi) if old is None else (min(old[0], lo), max(old[1], hi))
            attn_max[i] = max(attn_max[i], float(taps.attn.max()))

    sites: dict[int, SiteQuant] = {}
    for i in qsites:
        names = ACT_TENSORS if cfg.agq_enabled else ACT_TENSORS + ("attn",)
        if cfg.scale_init == "mse_grid":
            collected = {name: [] for name in names}
            for sample in calib:
                taps = forward(blocks[i], *sample[i])
                for name, t in _all_taps(taps, sample[i]).items():
                    if name in collected:
                        collected[name].append(t)
            acts = {n: _mse_grid_params(collected[n], *ranges[i][n], cfg.act_bits) for n in names}
        else:
            acts = {n: uniform_params_from_range(*ranges[i][n], cfg.act_bits) for n in names}
        weights = {n: per_channel_params(w, cfg.weight_bits) for n, w in blocks[i].weights().items()}
        attn_params = acts.pop("attn") if not cfg.agq_enabled else None
        sites[i] = SiteQuant(weights=weights, acts=acts, attn=attn_params)

    state = TauSearchState(cfg.tau_candidates)
    if cfg.agq_enabled:
        for sample in calib:
            for i in qsites:
                taps = forward(blocks[i], *sample[i])
                values = taps.v_act
                if cfg.quantize_values_in_search:
                    values = fake_quant_uniform(values, sites[i].acts["v"])
                scale = _agq_scale(cfg, attn_max[i])
                state.add(i, taps.attn, values, scale, cfg.act_bits)
            state.samples_seen += 1
        for i in qsites:
            best = state.best(i)
            sites[i] = SiteQuant(sites[i].weights, sites[i].acts, AgqParams(_agq_scale(cfg, attn_max[i]), cfg.act_bits, best))

    qmodel = QuantizedModel(blocks, sites, verdicts, gammas, cfg)
    errs = quant_error_report(list(model), qmodel, calib)
    tokens = [(xs[0].shape[0], xs[1].shape[0]) for xs in calib[0]]
    flops, storage = flops_storage_estimate(list(model), cfg.weight_bits, cfg.act_bits, tokens=tokens, quantized_sites=qsites)
    report = _build_report(qmodel, state, errs, flops, storage)
    return qmodel, report


def _agq_scale(cfg: CalibrationConfig, running_max: float) -> float:
    if cfg.agq_scale == "running_max" and running_max > 0:
        return running_max
    return 1.0


def _build_report(qmodel: QuantizedModel, state: TauSearchState, errs: dict, flops: float, storage: float):
    rows = []
    err_by_site = {s["index"]: s for s in errs["sites"]}
    for i, block in enumerate(qmodel.blocks):
        gamma = qmodel.gammas.get(i)
        row = {
            "index": i,
            "kind": block.kind,
            "quantized": i in qmodel.sites,
            "verdict": qmodel.verdicts[i].to_dict(),
            "gamma": {
                "applied": gamma is not None,
                "channels": int(block.W_k.shape[1]),
                "negative": int((gamma < 0).sum()) if gamma is not None else 0,
            },
        }
        if i in qmodel.sites:
            sq = qmodel.sites[i]
            row["acts"] = {n: {"scale": p.scale, "zero_point": p.zero_point} for n, p in sq.acts.items()}
            if isinstance(sq.attn, AgqParams):
                row["attn"] = {"quantizer": "agq", "scale": sq.attn.scale, "tau": sq.attn.tau}
                row["tau_errors"] = {str(t): e for t, e in state.errors[i].items()}
            else:
                row["attn"] = {"quantizer": "uniform", "scale": sq.attn.scale, "zero_point": sq.attn.zero_point}
            row["mse"] = err_by_site[i]["mse"]
        row["output_error"] = err_by_site[i]["output_error"]
        rows.append(row)
    cfg = qmodel.config
    model_doc = {
        "config": {
            "weight_bits": cfg.weight_bits,
            "act_bits": cfg.act_bits,
            "tau_candidates": list(cfg.tau_candidates),
            "scale_init": cfg.scale_init,
            "num_samples": cfg.num_samples,
            "big_enabled": cfg.big_enabled,
            "agq_enabled": cfg.agq_enabled,
            "skip_first_last": cfg.skip_first_last,
            "detector": cfg.detector,
            "agq_scale": cfg.agq_scale,
        },
        "output_error": errs["output_error"],
        "flops_ratio": flops,
        "storage_ratio": storage,
        "samples_seen": state.samples_seen,
    }
    return CalibrationReport(sites=rows, model=model_doc)


def quantized_forward(qmodel: QuantizedModel, site: int, x_q, x_k, x_v, lut_mode: str | None = None) -> AttentionTaps:
    """Fake-quantized forward pass of one site; unquantized sites run in float.

    With ``lut_mode`` set and an AGQ site, attention-times-value goes through
    :func:`agq_matmul_lut` instead of the dequantize-then-multiply path.
    """
    block = qmodel.blocks[site]
    sq = qmodel.sites.get(site)
    if sq is None:
        return forward(block, x_q, x_k, x_v)
    a = sq.acts
    n = block.W_q.shape[1]
    w = {name: fake_quant_per_channel(W, sq.weights[name]) for name, W in block.weights().items()}
    q = fake_quant_uniform(matmul(fake_quant_uniform(x_q, a["x_q"]), w["W_q"]) + block.b_q, a["q"])
    k = fake_quant_uniform(matmul(fake_quant_uniform(x_k, a["x_k"]), w["W_k"]) + block.b_k, a["k"])
    v_float = matmul(fake_quant_uniform(x_v, a["x_v"]), w["W_v"]) + block.b_v
    v = fake_quant_uniform(v_float, a["v"])
    scores = (matmul(q, k.T) / np.float32(math.sqrt(n))).astype(np.float32)
    attn = softmax_rows(scores)
    if isinstance(sq.attn, AgqParams):
        codes = agq_quant(attn, sq.attn)
        attn_hat = agq_dequant(codes, sq.attn)
        if lut_mode is not None:
            lut = build_lut(sq.attn.tau, sq.attn.bits)
            if lut.bits != a["v"].bits:
                raise ValueError("LUT path needs equal attention and value bit-widths")
            v_codes = uniform_quant(v_float, a["v"])
            out = agq_matmul_lut(codes, v_codes, lut, sq.attn.scale, a["v"].scale, a["v"].zero_point, lut_mode)
            return AttentionTaps(q, k, v, scores, attn_hat, out)
    else:
        attn_hat = fake_quant_uniform(attn, sq.attn)
    return AttentionTaps(q, k, v, scores, attn_hat, matmul(attn_hat, v))


def quant_error_report(model, quantized: QuantizedModel, data, lut_mode: str | None = None) -> dict:
    """Per-tensor MSE of each quantized tensor and end-to-end output error.

    Per-tensor MSE compares a tensor of the transformed float model with its
    fake-quantized copy. ``output_error`` is the squared Frobenius distance
    between the original float model output and the quantized model output,
    summed over sites and samples.
    """
    rows = []
    total = 0.0
    for i, block in enumerate(model):
        sq = quantized.sites.get(i)
        mse = {}
        out_err = 0.0
        for sample in data:
            xs = sample[i]
            ref = forward(block, *xs).output
            out_err += frobenius_sq(ref, quantized_forward(quantized, i, *xs, lut_mode=lut_mode).output)
            if sq is None:
                continue
            taps = _all_taps(forward(quantized.blocks[i], *xs), xs)
            for name, p in sq.acts.items():
                t = taps[name]
                mse[name] = mse.get(name, 0.0) + frobenius_sq(t, fake_quant_uniform(t, p)) / t.size
            t = taps["attn"]
            if isinstance(sq.attn, AgqParams):
                t_hat = agq_dequant(agq_quant(t, sq.attn), sq.attn)
            else:
                t_hat = fake_quant_uniform(t, sq.attn)
            mse["attn"] = mse.get("attn", 0.0) + frobenius_sq(t, t_hat) / t.size
        if sq is not None:
            for name, W in quantized.blocks[i].weights().items():
                mse[name] = frobenius_sq(W, fake_quant_per_channel(W, sq.weights[name])) / W.size
        if data:
            for name in ("attn",) + ACT_TENSORS:
                if name in mse:
                    mse[name] /= len(data)
        rows.append({"index": i, "mse": dict(sorted(mse.items())), "output_error": out_err})
        total += out_err
    return {"sites": rows, "output_error": total}


def flops_storage_estimate(
    model,
    weight_bits: int,
    act_bits: int,
    tokens=None,
    quantized_sites=None,
) -> tuple[float, float]:
    """Multiplication-cost and weight-storage ratios relative to float32.

    A ``b``-bit multiplication costs ``b/32`` of a float32 one (``1/8`` at 4 bits,
    ``6/32`` at 6 bits). Linear layers use the wider of the weight and
    activation widths; the two attention products use the activation width.
    Storage counts the weight matrices. Sites outside ``quantized_sites``
    (default: all) stay at 32 bits.
    """
    for b in (weight_bits, act_bits):
        if b not in BIT_COST:
            raise ValueError(f"unsupported bit-width {b}; expected one of {sorted(BIT_COST)}")
    if quantized_sites is None:
        quantized_sites = range(len(model))
    quantized_sites = set(quantized_sites)
    lin_cost = BIT_COST[max(weight_bits, act_bits)]
    act_cost = BIT_COST[act_bits]
    total = weighted = 0.0
    store_total = store_weighted = 0.0
    for i, block in enumerate(model):
        t_q, t_k = tokens[i] if tokens is not None else DEFAULT_TOKENS[block.kind]
        m, n = block.W_q.shape
        linear = (t_q + 2 * t_k) * m * n
        attention = 2 * t_q * t_k * n
        params = 3 * m * n
        q = i in quantized_sites
        total += linear + attention
        weighted += linear * (lin_cost if q else 1.0) + attention * (act_cost if q else 1.0)
        store_total += params * 32
        store_weighted += params * (weight_bits if q else 32)
    if total == 0:
        return 1.0, 1.0
    return weighted / total, store_weighted / store_total


def run_ablation(model, calib, data, cfg: CalibrationConfig = CalibrationConfig()) -> list[dict]:
    """BIG on/off x AGQ on/off; end-to-end output error of each combination."""
    rows = []
    for big, agq in ((False, False), (True, False), (False, True), (True, True)):
        c = CalibrationConfig(**{**_cfg_fields(cfg), "big_enabled": big, "agq_enabled": agq})
        qmodel, _ = calibrate(model, calib, c)
        err = quant_error_report(model, qmodel, data)["output_error"]
        rows.append({"big": big, "agq": agq, "output_error": err})
    return rows


def _cfg_fields(cfg: CalibrationConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
