import math

import numpy as np
import pytest

from agquant.attention import SyntheticSpec, forward, gen_bimodal_block, gen_post_softmax, make_toy_model, rng_for, sample_inputs
from agquant.bimodal import apply_big, compute_gamma
from agquant.calibration import (
    CalibrationConfig,
    QuantizedModel,
    TauSearchState,
    calibrate,
    flops_storage_estimate,
    quant_error_report,
    quantized_forward,
    search_tau,
)
from agquant.quantizers import AgqParams, fake_quant_uniform, uniform_params_from_range
from agquant.tensor import col_scale, matmul


def replay_tau_oracle(attn, values, tau, bits, s):
    """Tau error for one sample from scalar formulas, independent of the quantizer module."""
    qmax = 2**bits - 1
    a = np.asarray(attn, dtype=np.float64)
    codes = np.full(a.shape, qmax, dtype=np.float64)
    pos = a > 0
    codes[pos] = np.clip(np.round(-np.log(a[pos] / s) / math.log(2 ** (1 / tau))), 0, qmax)
    a_hat = (s * 2.0 ** (-codes / tau)).astype(np.float32).astype(np.float64)
    v = np.asarray(values, dtype=np.float64)
    ref = (a @ v).astype(np.float32).astype(np.float64)
    got = (a_hat @ v).astype(np.float32).astype(np.float64)
    return float(((ref - got) ** 2).sum())


@pytest.fixture(scope="module")
def toy():
    model = make_toy_model(3)
    return model, sample_inputs(model, 11, 32), sample_inputs(model, 12, 4)


@pytest.fixture(scope="module")
def calibrated(toy):
    model, calib, _ = toy
    return calibrate(model, calib, CalibrationConfig(weight_bits=4, act_bits=4))


def _single_bimodal_site(seed=0):
    block, x_k, _ = gen_bimodal_block(SyntheticSpec(seed=seed, tokens_k=96))
    x_q = rng_for(seed, 8).standard_normal((48, 32)).astype(np.float32)
    return [block], [[(x_q, x_k, x_k)]]


def test_single_sample_applies_big():
    model, calib = _single_bimodal_site()
    for skip in (True, False):
        qm, report = calibrate(model, calib, CalibrationConfig(skip_first_last=skip))
        assert report.sites[0]["verdict"]["is_bimodal"] is True
        assert report.sites[0]["gamma"]["applied"] is True
        gamma = qm.gammas[0]
        assert qm.blocks[0].same_as(apply_big(model[0], gamma))
        assert (0 in qm.sites) is (not skip)


def test_big_disabled_leaves_blocks(toy):
    model, calib, _ = toy
    qm, report = calibrate(model, calib[:4], CalibrationConfig(big_enabled=False))
    assert all(a.same_as(b) for a, b in zip(qm.blocks, model))
    assert not any(s["gamma"]["applied"] for s in report.sites)


def test_chosen_tau_matches_bruteforce_replay(toy, calibrated):
    model, calib, _ = toy
    qm, report = calibrated
    for site, sq in qm.sites.items():
        # replay the transformed model over the whole calibration set
        sums = {t: 0.0 for t in (1, 2, 4)}
        for sample in calib:
            taps = forward(qm.blocks[site], *sample[site])
            for t in sums:
                sums[t] += replay_tau_oracle(taps.attn, taps.v_act, t, 4, sq.attn.scale)
        best = min(sums, key=lambda t: (sums[t], t))
        assert sq.attn.tau == best
        row = report.sites[site]
        for t in sums:
            assert row["tau_errors"][str(t)] == pytest.approx(sums[t], rel=1e-6)
        assert all(row["tau_errors"][str(sq.attn.tau)] <= e for e in row["tau_errors"].values())


def test_search_tau_zero_error_case():
    r = np.random.default_rng(0)
    a = 2.0 ** -r.integers(0, 14, (6, 10))
    v = r.standard_normal((10, 4)).astype(np.float32)
    tau, errors = search_tau([a.astype(np.float32)], [v], (1, 2, 4), bits=4, s_a=1.0)
    assert errors[1] == 0.0
    assert tau == 1
    assert errors[2] > 0 and errors[4] > 0


def test_search_tau_returns_minimum():
    r = np.random.default_rng(1)
    attn = [gen_post_softmax(SyntheticSpec(seed=s, tokens_q=8, tokens_k=16, regime="softmax_peaked")) for s in range(3)]
    vals = [r.standard_normal((16, 5)).astype(np.float32) for _ in range(3)]
    tau, errors = search_tau(attn, vals, (1, 2, 4), bits=4)
    assert set(errors) == {1, 2, 4}
    assert all(errors[tau] <= e for e in errors.values())
    for t in errors:
        assert errors[t] == pytest.approx(sum(replay_tau_oracle(a, v, t, 4, 1.0) for a, v in zip(attn, vals)), rel=1e-6)


def test_search_tau_errors():
    with pytest.raises(ValueError):
        search_tau([], [], (1, 2), bits=4)


def test_search_tau_tie_goes_to_smaller():
    a = np.ones((2, 2), dtype=np.float32)
    v = np.ones((2, 2), dtype=np.float32)
    tau, errors = search_tau([a], [v], (4, 2, 1), bits=4)
    assert errors == {1: 0.0, 2: 0.0, 4: 0.0} and tau == 1


def test_smooth_attention_prefers_tau1():
    picks = []
    for seed in range(10):
        a = gen_post_softmax(SyntheticSpec(seed=seed, tokens_q=8, tokens_k=4096, regime="softmax_smooth"))
        v = rng_for(seed, 5).standard_normal((4096, 16)).astype(np.float32)
        picks.append(search_tau([a], [v], (1, 2, 4), bits=4)[0])
    assert np.mean(np.array(picks) == 1) >= 0.8


def test_peaked_attention_prefers_finer_tau():
    picks = []
    for seed in range(10):
        a = gen_post_softmax(SyntheticSpec(seed=seed, tokens_q=64, tokens_k=8, regime="softmax_peaked"))
        v = rng_for(seed, 5).standard_normal((8, 16)).astype(np.float32)
        picks.append(search_tau([a], [v], (1, 2, 4), bits=4)[0])
    assert np.mean(np.array(picks) > 1) >= 0.8


def test_tau_state_monotone():
    state = TauSearchState((1, 2, 4))
    prev = None
    for seed in range(4):
        a = gen_post_softmax(SyntheticSpec(seed=seed, tokens_q=8, tokens_k=32, regime="softmax_smooth"))
        v = rng_for(seed, 1).standard_normal((32, 4)).astype(np.float32)
        state.add(0, a, v, 1.0, 4)
        cur = dict(state.errors[0])
        assert all(e >= 0 for e in cur.values())
        if prev:
            assert all(cur[t] >= prev[t] for t in cur)
        prev = cur


def test_skipped_sites_have_no_params(calibrated, toy):
    qm, report = calibrated
    n = len(toy[0])
    assert set(qm.sites) == set(range(1, n - 1))
    assert "acts" not in report.sites[0] and "acts" not in report.sites[-1]


def test_calibration_is_replayable(toy, calibrated):
    model, calib, _ = toy
    _, again = calibrate(model, calib, CalibrationConfig(weight_bits=4, act_bits=4))
    assert again.to_dict() == calibrated[1].to_dict()


def test_order_independence(toy, calibrated):
    model, calib, _ = toy
    perm = [calib[i] for i in np.random.default_rng(0).permutation(len(calib))]
    # BIG uses the first sample, so keep it in place
    perm = [calib[0]] + [s for s in perm if s is not calib[0]]
    _, report = calibrate(model, perm, CalibrationConfig(weight_bits=4, act_bits=4))
    for a, b in zip(report.sites, calibrated[1].sites):
        for t, e in a.get("tau_errors", {}).items():
            assert e == pytest.approx(b["tau_errors"][t], rel=1e-6)


def test_big_lowers_key_mse():
    block, x_k, _ = gen_bimodal_block(SyntheticSpec(seed=4, tokens_k=128))
    k = matmul(x_k, block.W_k) + block.b_k
    k2 = col_scale(k, compute_gamma(k))

    def mse(t):
        p = uniform_params_from_range(float(t.min()), float(t.max()), 6)
        return float(np.mean((t - fake_quant_uniform(t, p)) ** 2))

    assert mse(k2) < mse(k)


def test_passthrough_has_zero_error(toy):
    model, calib, data = toy
    qm = QuantizedModel(list(model), {}, {}, {}, CalibrationConfig())
    errs = quant_error_report(model, qm, data)
    assert errs["output_error"] == 0.0
    assert all(not s["mse"] for s in errs["sites"])


def test_passthrough_after_big_is_exact(toy):
    model, calib, data = toy
    qm, _ = calibrate(model, calib[:2], CalibrationConfig())
    bare = QuantizedModel(qm.blocks, {}, qm.verdicts, qm.gammas, qm.config)
    assert quant_error_report(model, bare, data)["output_error"] == 0.0


def test_uniform_noise_mse():
    x = np.random.default_rng(3).uniform(0, 1, 200000).astype(np.float32)
    p = uniform_params_from_range(0.0, 1.0, 8)
    mse = float(np.mean((x - fake_quant_uniform(x, p)) ** 2))
    assert mse == pytest.approx(p.scale**2 / 12, rel=0.2)


def test_report_contents(calibrated):
    qm, report = calibrated
    assert report.model["output_error"] > 0
    assert 0 < report.model["flops_ratio"] < 1 and 0 < report.model["storage_ratio"] < 1
    for row in report.sites:
        if row["quantized"]:
            assert set(row["mse"]) >= {"q", "k", "v", "attn", "W_q"}
            assert row["attn"]["tau"] in (1, 2, 4)


def test_mse_grid_not_worse_than_minmax(toy):
    model, calib, _ = toy
    calib = calib[:4]
    cfg_mm = CalibrationConfig(weight_bits=4, act_bits=4)
    cfg_grid = CalibrationConfig(weight_bits=4, act_bits=4, scale_init="mse_grid")
    qm_mm, _ = calibrate(model, calib, cfg_mm)
    qm_grid, _ = calibrate(model, calib, cfg_grid)
    e_mm = quant_error_report(model, qm_mm, calib)
    e_grid = quant_error_report(model, qm_grid, calib)
    for a, b in zip(e_grid["sites"], e_mm["sites"]):
        for name in ("q", "k", "v"):
            if name in a["mse"]:
                assert a["mse"][name] <= b["mse"][name] * (1 + 1e-9)


def test_agq_disabled_uses_uniform_attention(toy):
    model, calib, _ = toy
    qm, report = calibrate(model, calib[:2], CalibrationConfig(agq_enabled=False))
    assert qm.taus == {}
    assert all(r["attn"]["quantizer"] == "uniform" for r in report.sites if r["quantized"])


def test_lut_exact_path_matches_float(toy):
    model, calib, data = toy
    qm, _ = calibrate(model, calib[:4], CalibrationConfig(weight_bits=6, act_bits=6))
    for site in qm.sites:
        xs = data[0][site]
        ref = quantized_forward(qm, site, *xs).output.astype(np.float64)
        exact = quantized_forward(qm, site, *xs, lut_mode="exact").output.astype(np.float64)
        hw = quantized_forward(qm, site, *xs, lut_mode="hardware").output
        assert np.linalg.norm(exact - ref) <= 1e-5 * np.linalg.norm(ref)
        assert np.all(np.isfinite(hw))


def test_calibrate_errors(toy):
    model, calib, _ = toy
    with pytest.raises(ValueError):
        calibrate(model, [], CalibrationConfig())
    with pytest.raises(ValueError):
        calibrate(model[:-1], calib[:1], CalibrationConfig())
    bad = [list(calib[0])]
    bad[0][1] = (bad[0][1][0][:, :5], bad[0][1][1], bad[0][1][2])
    with pytest.raises(ValueError):
        calibrate(model, bad, CalibrationConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        CalibrationConfig(num_samples=0)
    with pytest.raises(ValueError):
        CalibrationConfig(tau_candidates=(1, 3))
    with pytest.raises(ValueError):
        CalibrationConfig(tau_candidates=())
    with pytest.raises(ValueError):
        CalibrationConfig(act_bits=9)


def test_num_samples_truncates(toy):
    model, calib, _ = toy
    qm, report = calibrate(model, calib, CalibrationConfig(num_samples=3))
    assert report.model["samples_seen"] == 3


# FLOPs / storage -----------------------------------------------------------


def test_flops_storage_float():
    model = make_toy_model(0)
    assert flops_storage_estimate(model, 32, 32) == (1.0, 1.0)


def test_flops_storage_w4a4():
    model = make_toy_model(0)
    flops, storage = flops_storage_estimate(model, 4, 4)
    assert 1 - storage == 0.875
    assert flops == 1 / 8


def test_flops_w6a6():
    flops, storage = flops_storage_estimate(make_toy_model(1), 6, 6)
    assert flops == 6 / 32
    assert storage == 6 / 32


def test_flops_partial_quantization():
    model = make_toy_model(0)
    flops, storage = flops_storage_estimate(model, 4, 4, quantized_sites=range(1, len(model) - 1))
    assert 1 / 8 < flops < 1 and 1 / 8 < storage < 1


def test_flops_unsupported_bits():
    with pytest.raises(ValueError):
        flops_storage_estimate(make_toy_model(0), 5, 5)
