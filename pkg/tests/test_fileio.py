import json
import struct

import numpy as np
import pytest

from agquant.attention import make_toy_model, sample_inputs
from agquant.calibration import CalibrationConfig, CalibrationReport, calibrate, quantized_forward
from agquant.fileio import (
    ConfigError,
    ContainerError,
    decode_tensor,
    emit_ablation,
    emit_report,
    encode_tensor,
    load_quantized_model,
    parse_report,
    parse_run_config,
    read_tensor,
    save_quantized_model,
    write_tensor,
)
from agquant.tensor import IntTensor

SHAPES = [(), (1,), (7,), (3, 4), (2, 3, 5), (1, 1, 1, 1)]


def test_header_layout():
    buf = encode_tensor(np.array([[1.5, -2.0, 0.25]], dtype=np.float32))
    assert buf[:4] == b"PTQT"
    assert struct.unpack_from("<IBBB", buf, 4) == (1, 0, 32, 2)
    assert struct.unpack_from("<2Q", buf, 11) == (1, 3)
    assert np.frombuffer(buf[27:], "<f4").tolist() == [1.5, -2.0, 0.25]


def test_int_header_layout():
    buf = encode_tensor(IntTensor(np.array([3, 0, 15]), 4))
    assert struct.unpack_from("<IBBB", buf, 4) == (1, 1, 4, 1)
    assert buf[-3:] == bytes([3, 0, 15])


@pytest.mark.parametrize("shape", SHAPES)
def test_float_roundtrip(shape, tmp_path):
    r = np.random.default_rng(len(shape))
    t = (r.standard_normal(shape) * 1e3).astype(np.float32)
    if t.size:
        t.ravel()[0] = np.float32(1e-40)  # subnormal
    write_tensor(tmp_path / "t.ptqt", t)
    back = read_tensor(tmp_path / "t.ptqt")
    assert back.dtype == np.float32 and back.shape == shape
    assert np.array_equal(back.view(np.uint32), t.view(np.uint32))


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("bits", [2, 4, 6, 8])
def test_int_roundtrip(shape, bits, tmp_path):
    r = np.random.default_rng(bits)
    t = IntTensor(r.integers(0, 2**bits, shape), bits)
    write_tensor(tmp_path / "q.ptqt", t)
    back = read_tensor(tmp_path / "q.ptqt")
    assert isinstance(back, IntTensor) and back.bits == bits
    assert np.array_equal(back.data, t.data) and back.shape == shape


def test_bad_magic():
    buf = bytearray(encode_tensor(np.zeros(3, dtype=np.float32)))
    buf[0:4] = b"XXXX"
    with pytest.raises(ContainerError) as e:
        decode_tensor(bytes(buf))
    assert e.value.code == 2


def test_truncated_payload():
    buf = encode_tensor(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ContainerError) as e:
        decode_tensor(buf[:-1])
    assert e.value.code == 3
    with pytest.raises(ContainerError) as e:
        decode_tensor(buf[:12])
    assert e.value.code == 3


def test_dim_overflow():
    buf = b"PTQT" + struct.pack("<IBBB", 1, 0, 32, 2) + struct.pack("<2Q", 2**40, 2**40)
    with pytest.raises(ContainerError) as e:
        decode_tensor(buf)
    assert e.value.code == 4


def test_bad_version_and_dtype():
    buf = bytearray(encode_tensor(np.zeros(2, dtype=np.float32)))
    struct.pack_into("<I", buf, 4, 2)
    with pytest.raises(ContainerError) as e:
        decode_tensor(bytes(buf))
    assert e.value.code == 5
    buf = b"PTQT" + struct.pack("<IBBB", 1, 7, 8, 0)
    with pytest.raises(ContainerError) as e:
        decode_tensor(buf)
    assert e.value.code == 6


def test_distinct_error_codes():
    codes = {ContainerError.BAD_MAGIC, ContainerError.TRUNCATED, ContainerError.DIM_OVERFLOW, ContainerError.BAD_VERSION, ContainerError.BAD_DTYPE}
    assert len(codes) == 5


# config -----------------------------------------------------------------------

CONFIG = """
[run]
seed = 7
eval_samples = 3

[calibration]
weight_bits = 4
act_bits = 4
tau_candidates = 1, 2
num_samples = 5
big_enabled = false
detector = kde

[histogram]
n_bins = 64
top_k = 8

[synthetic]
regime = softmax_peaked
tokens_k = 8
"""


def test_parse_run_config():
    cfg = parse_run_config(CONFIG)
    assert cfg.seed == 7 and cfg.eval_samples == 3
    c = cfg.calibration
    assert (c.weight_bits, c.act_bits, c.tau_candidates, c.num_samples) == (4, 4, (1, 2), 5)
    assert c.big_enabled is False and c.detector == "kde"
    assert c.histogram.n_bins == 64 and c.histogram.top_k == 8
    assert cfg.synthetic.regime == "softmax_peaked" and cfg.synthetic.seed == 7


@pytest.mark.parametrize(
    "text",
    [
        "[calibration]\nbogus = 1\n",
        "[nonsense]\na = 1\n",
        "[run]\nseed = abc\n",
        "[calibration]\nnum_samples = 0\n",
        "[calibration]\nbig_enabled = maybe\n",
        "[histogram]\ntop_k = 500\n",
        "[synthetic]\nregime = weird\n",
        "not an ini file",
    ],
)
def test_invalid_config(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


# reports ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def report_and_model():
    model = make_toy_model(2)
    return calibrate(model, sample_inputs(model, 3, 4), CalibrationConfig(weight_bits=4, act_bits=4))


def test_report_json_roundtrip(report_and_model):
    _, report = report_and_model
    text = emit_report(report, "json")
    assert parse_report(text).to_dict() == report.to_dict()
    assert emit_report(parse_report(text), "json") == text


def test_report_numeric_fidelity(report_and_model):
    _, report = report_and_model
    back = parse_report(emit_report(report, "json"))
    for a, b in zip(report.sites, back.sites):
        for t, e in a.get("tau_errors", {}).items():
            assert struct.pack("<d", e) == struct.pack("<d", b["tau_errors"][t])


def test_report_table_and_csv(report_and_model):
    _, report = report_and_model
    table = emit_report(report, "table")
    assert "output_error" in table and len(table.splitlines()) == 3 + len(report.sites)
    rows = emit_report(report, "csv").splitlines()
    assert rows[0].startswith("index,kind")
    assert len(rows) == 1 + len(report.sites)
    with pytest.raises(ValueError):
        emit_report(report, "xml")


def test_empty_report():
    empty = CalibrationReport(sites=[], model={})
    assert len(emit_report(empty, "csv").splitlines()) == 1
    assert json.loads(emit_report(empty, "json"))["sites"] == []


def test_ablation_table():
    rows = [
        {"big": False, "agq": False, "output_error": 4.0},
        {"big": True, "agq": False, "output_error": 3.0},
        {"big": False, "agq": True, "output_error": 2.5},
        {"big": True, "agq": True, "output_error": 1.0},
    ]
    lines = emit_ablation(rows, "table").splitlines()
    assert len(lines) == 2 + 4
    assert len(emit_ablation(rows, "csv").splitlines()) == 5


def test_quantized_model_roundtrip(report_and_model, tmp_path):
    qm, _ = report_and_model
    save_quantized_model(qm, tmp_path / "m")
    back = load_quantized_model(tmp_path / "m", qm.config)
    assert all(a.same_as(b) for a, b in zip(qm.blocks, back.blocks))
    assert back.sites == qm.sites
    assert back.taus == qm.taus
    assert {i: g.tolist() for i, g in back.gammas.items()} == {i: g.tolist() for i, g in qm.gammas.items()}
    xs = sample_inputs(qm.blocks, 9, 1)[0]
    for site in qm.sites:
        assert np.array_equal(quantized_forward(qm, site, *xs[site]).output, quantized_forward(back, site, *xs[site]).output)


def test_readme_config_block_parses():
    import re
    from pathlib import Path

    text = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    block = re.search(r"```ini\n(.*?)```", text, re.S).group(1)
    cfg = parse_run_config(block)
    assert cfg.seed == 0 and cfg.calibration.detector == "histogram"
    assert cfg.calibration.tau_candidates == (1, 2, 4)
    assert cfg.synthetic.regime == "bimodal_key"
