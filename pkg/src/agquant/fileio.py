"""Tensor container, run configuration, reports and quantized-model files.

Container layout (all integers little-endian)::

    magic   4 bytes  b"PTQT"
    version u32      1
    dtype   u8       0 = float32, 1 = unsigned integer codes
    bits    u8       32 for float32, code width otherwise
    ndim    u8
    dims    ndim x u64
    payload row-major values; float32 or one byte per code
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import AttentionBlockParams, SyntheticSpec
from .bimodal import BimodalVerdict, HistogramConfig, KdeConfig
from .calibration import CalibrationConfig, CalibrationReport, QuantizedModel, SiteQuant
from .quantizers import AgqParams, PerChannelUniformParams, UniformParams
from .tensor import IntTensor

__all__ = [
    "MAGIC",
    "VERSION",
    "ContainerError",
    "ConfigError",
    "write_tensor",
    "read_tensor",
    "encode_tensor",
    "decode_tensor",
    "RunConfig",
    "parse_run_config",
    "load_run_config",
    "emit_report",
    "parse_report",
    "emit_ablation",
    "save_quantized_model",
    "load_quantized_model",
]

MAGIC = b"PTQT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_UINT = 1
_HEADER = struct.Struct("<4sIBBB")
_MAX_BYTES = 1 << 62


class ContainerError(Exception):
    BAD_MAGIC = 2
    TRUNCATED = 3
    DIM_OVERFLOW = 4
    BAD_VERSION = 5
    BAD_DTYPE = 6

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class ConfigError(ValueError):
    pass


def encode_tensor(t) -> bytes:
    if isinstance(t, IntTensor):
        dtype, bits, payload = DTYPE_UINT, t.bits, np.asarray(t.data, dtype=np.uint8, order="C")
    else:
        payload = np.asarray(t, dtype="<f4", order="C")
        dtype, bits = DTYPE_F32, 32
    if payload.ndim > 255:
        raise ValueError("too many dimensions")
    head = _HEADER.pack(MAGIC, VERSION, dtype, bits, payload.ndim)
    dims = struct.pack(f"<{payload.ndim}Q", *payload.shape)
    return head + dims + payload.tobytes()


def decode_tensor(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise ContainerError(ContainerError.BAD_MAGIC, "not a tensor container (bad magic)")
    if len(buf) < _HEADER.size:
        raise ContainerError(ContainerError.TRUNCATED, "truncated header")
    _, version, dtype, bits, ndim = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise ContainerError(ContainerError.BAD_VERSION, f"unsupported container version {version}")
    if dtype == DTYPE_F32:
        if bits != 32:
            raise ContainerError(ContainerError.BAD_DTYPE, f"float32 container with bits={bits}")
        np_dtype, size = np.dtype("<f4"), 4
    elif dtype == DTYPE_UINT:
        if not 2 <= bits <= 8:
            raise ContainerError(ContainerError.BAD_DTYPE, f"integer container with bits={bits}")
        np_dtype, size = np.dtype(np.uint8), 1
    else:
        raise ContainerError(ContainerError.BAD_DTYPE, f"unknown dtype code {dtype}")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise ContainerError(ContainerError.TRUNCATED, "truncated dimension list")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    nbytes = math.prod(dims) * size
    if nbytes > _MAX_BYTES:
        raise ContainerError(ContainerError.DIM_OVERFLOW, f"dimensions {dims} overflow")
    if len(buf) - off != nbytes:
        raise ContainerError(
            ContainerError.TRUNCATED, f"payload is {len(buf) - off} bytes, expected {nbytes}"
        )
    arr = np.frombuffer(buf, dtype=np_dtype, count=math.prod(dims), offset=off).reshape(dims)
    if dtype == DTYPE_UINT:
        return IntTensor(arr.copy(), bits)
    return arr.astype(np.float32)


def write_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())


# run configuration -----------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    eval_samples: int = 8
    n_samples: int = 10000
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


_RUN_KEYS = {"seed": int, "eval_samples": int, "n_samples": int}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(value: str, default):
    if isinstance(default, bool):
        return _parse_bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value.strip()


def _section(cp, name: str, cls, extra=None):
    defaults = cls()
    kwargs = dict(extra or {})
    if not cp.has_section(name):
        return cls(**kwargs)
    known = {f.name for f in fields(cls)} - {"seed", "histogram", "kde"}
    for key, value in cp.items(name):
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        try:
            kwargs[key] = _coerce(value, getattr(defaults, key))
        except ValueError as e:
            raise ConfigError(f"[{name}] {key}: {e}") from None
    return cls(**kwargs)


def parse_run_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    allowed = {"run", "calibration", "histogram", "kde", "synthetic"}
    for s in cp.sections():
        if s not in allowed:
            raise ConfigError(f"unknown section [{s}]")
    run = {}
    if cp.has_section("run"):
        for key, value in cp.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown key {key!r} in [run]")
            try:
                run[key] = _RUN_KEYS[key](value)
            except ValueError as e:
                raise ConfigError(f"[run] {key}: {e}") from None
    try:
        hist = _section(cp, "histogram", HistogramConfig)
        kde = _section(cp, "kde", KdeConfig)
        calib = _section(cp, "calibration", CalibrationConfig, {"histogram": hist, "kde": kde})
        synth = _section(cp, "synthetic", SyntheticSpec, {"seed": run.get("seed", 0)})
        cfg = RunConfig(calibration=calib, synthetic=synth, **run)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    if cfg.eval_samples < 1 or cfg.n_samples < 2:
        raise ConfigError("eval_samples must be >= 1 and n_samples >= 2")
    return cfg


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text())


# reports --------------------------------------------------------------------

_TABLE_COLUMNS = ("index", "kind", "quantized", "bimodal", "gamma_neg", "attn", "tau", "output_error")


def _site_row(site: dict) -> dict:
    attn = site.get("attn") or {}
    return {
        "index": site["index"],
        "kind": site["kind"],
        "quantized": site["quantized"],
        "bimodal": site["verdict"]["is_bimodal"],
        "gamma_neg": site["gamma"]["negative"],
        "attn": attn.get("quantizer", "-"),
        "tau": attn.get("tau", "-"),
        "output_error": site["output_error"],
    }


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _table(rows: list[dict], columns) -> str:
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append([format(r[c], ".6g") if isinstance(r[c], float) else str(r[c]) for c in columns])
    widths = [max(len(row[j]) for row in cells) for j in range(len(columns))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _csv(rows: list[dict], columns) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return out.getvalue()


def emit_report(report: CalibrationReport, fmt: str = "json") -> str:
    """Render a report as ``json`` (round-trippable), ``table`` or ``csv``."""
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"
    rows = [_site_row(s) for s in report.sites]
    if fmt == "table":
        m = report.model
        head = (
            f"output_error={m.get('output_error', 0.0):.6g}  "
            f"flops_ratio={m.get('flops_ratio', 1.0):.6g}  storage_ratio={m.get('storage_ratio', 1.0):.6g}\n"
        )
        return head + _table(rows, _TABLE_COLUMNS)
    if fmt == "csv":
        return _csv(rows, _TABLE_COLUMNS)
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> CalibrationReport:
    return CalibrationReport.from_dict(json.loads(text))


def emit_ablation(rows: list[dict], fmt: str = "table") -> str:
    cols = ("big", "agq", "output_error")
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return _csv(rows, cols)
    if fmt == "table":
        return _table(rows, cols)
    raise ValueError(f"unknown report format {fmt!r}")


# quantized model files -------------------------------------------------------

_BLOCK_FIELDS = ("W_q", "W_k", "W_v", "b_q", "b_k", "b_v")


def _uniform_doc(p: UniformParams) -> dict:
    return {"scale": p.scale, "zero_point": p.zero_point, "bits": p.bits}


def save_quantized_model(qmodel: QuantizedModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"blocks": [], "sites": {}}
    for i, block in enumerate(qmodel.blocks):
        for name in _BLOCK_FIELDS:
            write_tensor(d / f"block{i:03d}_{name}.ptqt", getattr(block, name))
        meta["blocks"].append(
            {
                "kind": block.kind,
                "verdict": qmodel.verdicts[i].to_dict() if i in qmodel.verdicts else None,
                "gamma": qmodel.gammas[i].tolist() if i in qmodel.gammas else None,
            }
        )
    for i, sq in qmodel.sites.items():
        attn = sq.attn
        meta["sites"][str(i)] = {
            "acts": {n: _uniform_doc(p) for n, p in sq.acts.items()},
            "weights": {n: [_uniform_doc(c) for c in p.channels] for n, p in sq.weights.items()},
            "attn": (
                {"quantizer": "agq", "scale": attn.scale, "bits": attn.bits, "tau": attn.tau}
                if isinstance(attn, AgqParams)
                else {"quantizer": "uniform", **_uniform_doc(attn)}
            ),
        }
    (d / "params.json").write_text(json.dumps(meta, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _verdict_from(doc: dict) -> BimodalVerdict:
    nan = float("nan")

    def num(k):
        return nan if doc[k] is None else doc[k]

    return BimodalVerdict(
        doc["is_bimodal"],
        num("center_neg"),
        num("center_pos"),
        num("radius_neg"),
        num("radius_pos"),
        num("mass_topk"),
        doc["method"],
        doc["reason"],
    )


def load_quantized_model(directory, config: CalibrationConfig | None = None) -> QuantizedModel:
    d = Path(directory)
    meta = json.loads((d / "params.json").read_text())
    blocks, verdicts, gammas = [], {}, {}
    for i, b in enumerate(meta["blocks"]):
        arrays = {name: read_tensor(d / f"block{i:03d}_{name}.ptqt") for name in _BLOCK_FIELDS}
        blocks.append(AttentionBlockParams(**arrays, kind=b["kind"]))
        if b["verdict"] is not None:
            verdicts[i] = _verdict_from(b["verdict"])
        if b["gamma"] is not None:
            gammas[i] = np.array(b["gamma"], dtype=np.int8)
    sites = {}
    for key, s in meta["sites"].items():
        a = s["attn"]
        if a["quantizer"] == "agq":
            attn = AgqParams(a["scale"], a["bits"], a["tau"])
        else:
            attn = UniformParams(a["scale"], a["zero_point"], a["bits"])
        sites[int(key)] = SiteQuant(
            weights={n: PerChannelUniformParams(tuple(UniformParams(**c) for c in chans)) for n, chans in s["weights"].items()},
            acts={n: UniformParams(**p) for n, p in s["acts"].items()},
            attn=attn,
        )
    return QuantizedModel(blocks, sites, verdicts, gammas, config or CalibrationConfig())
