"""Command-line driver: ``agquant <subcommand> ...``.

Exit codes: 0 success, 64 usage error, 65 invalid configuration or data,
74 I/O error. Diagnostics go to stderr only.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import attention, bimodal
from .calibration import calibrate, quant_error_report, quantized_forward, run_ablation
from .fileio import (
    ConfigError,
    ContainerError,
    RunConfig,
    emit_ablation,
    emit_report,
    load_quantized_model,
    load_run_config,
    parse_report,
    read_tensor,
    save_quantized_model,
    write_tensor,
)
from .quantizers import build_lut
from .tensor import matmul

EX_OK = 0
EX_USAGE = 64
EX_DATAERR = 65
EX_IOERR = 74

# seed offsets separating the calibration and evaluation input streams
_CALIB_STREAM = 1
_EVAL_STREAM = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _config(args) -> RunConfig:
    return load_run_config(args.config) if args.config else RunConfig()


def _toy_setup(cfg: RunConfig):
    s = cfg.synthetic
    model = attention.make_toy_model(
        cfg.seed, dim=s.dim, channels=s.channels, center=s.center, width=s.width, frac_positive=s.frac_positive
    )
    calib = attention.sample_inputs(model, cfg.seed * 2 + _CALIB_STREAM, cfg.calibration.num_samples)
    data = attention.sample_inputs(model, cfg.seed * 2 + _EVAL_STREAM, cfg.eval_samples)
    return model, calib, data


def cmd_gen(args) -> int:
    cfg = _config(args)
    spec = cfg.synthetic
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if spec.regime in ("softmax_smooth", "softmax_peaked"):
        write_tensor(out / "attn.ptqt", attention.gen_post_softmax(spec))
    else:
        block, signs = attention.gen_block(spec)
        x_k = attention.rng_for(spec.seed, stream=2).standard_normal((spec.tokens_k, spec.dim)).astype(np.float32)
        k_act = matmul(x_k, block.W_k) + block.b_k
        write_tensor(out / "x_k.ptqt", x_k)
        write_tensor(out / "k_act.ptqt", k_act)
        write_tensor(out / "signs.ptqt", signs.astype(np.float32))
        for name in ("W_q", "W_k", "W_v", "b_q", "b_k", "b_v"):
            write_tensor(out / f"{name}.ptqt", getattr(block, name))
    print(f"wrote {spec.regime} tensors to {out}")
    return EX_OK


def cmd_discriminate(args) -> int:
    cfg = _config(args)
    x = read_tensor(args.input)
    if not isinstance(x, np.ndarray):
        x = x.data.astype(np.float32)
    detectors = ("histogram", "kde") if args.detector == "both" else (args.detector,)
    for det in detectors:
        if det == "histogram":
            h = bimodal.build_histogram(x, cfg.calibration.histogram.n_bins)
            v = bimodal.discriminate_histogram(h, cfg.calibration.histogram)
        else:
            v = bimodal.discriminate_kde(x, cfg.calibration.kde)
        for key, value in v.to_dict().items():
            if isinstance(value, bool):
                value = str(value).lower()
            print(f"{det}.{key}={value}")
    return EX_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    model, calib, _ = _toy_setup(cfg)
    qmodel, report = calibrate(model, calib, cfg.calibration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(emit_report(report, "json"))
    save_quantized_model(qmodel, out / "model")
    sys.stdout.write(emit_report(report, args.format))
    return EX_OK


def cmd_quantize(args) -> int:
    cfg = _config(args)
    qmodel = load_quantized_model(args.model, cfg.calibration)
    if not 0 <= args.site < len(qmodel.blocks):
        raise ConfigError(f"site {args.site} out of range")
    xs = [read_tensor(p) for p in args.inputs]
    taps = quantized_forward(qmodel, args.site, *xs, lut_mode=args.lut)
    write_tensor(args.out, taps.output)
    print(f"wrote site {args.site} output {taps.output.shape} to {args.out}")
    return EX_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, calib, data = _toy_setup(cfg)
    if args.ablation:
        sys.stdout.write(emit_ablation(run_ablation(model, calib, data, cfg.calibration), args.format))
        return EX_OK
    if args.model:
        qmodel = load_quantized_model(args.model, cfg.calibration)
    else:
        qmodel, _ = calibrate(model, calib, cfg.calibration)
    errs = quant_error_report(model, qmodel, data, lut_mode=args.lut)
    for row in errs["sites"]:
        print(f"site {row['index']}: output_error={row['output_error']:.17g}")
        for name, v in row["mse"].items():
            print(f"  mse.{name}={v:.17g}")
    print(f"output_error={errs['output_error']:.17g}")
    return EX_OK


def cmd_lut_dump(args) -> int:
    lut = build_lut(args.tau, args.bits)
    write_tensor(args.out, lut.entries)
    print(f"wrote LUT tau={lut.tau} bits={lut.bits} ({lut.entries.size} entries, {lut.nbytes} bytes) to {args.out}")
    return EX_OK


def cmd_report(args) -> int:
    report = parse_report(Path(args.input).read_text())
    sys.stdout.write(emit_report(report, args.format))
    return EX_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agquant", description="Bimodal-aware post-training quantization toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="INI run configuration")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen", cmd_gen, "write synthetic tensors for the configured regime")
    sp.add_argument("--out", required=True)
    sp = add("discriminate", cmd_discriminate, "run the bimodal detectors on a tensor file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--detector", choices=("histogram", "kde", "both"), default="histogram")
    sp = add("calibrate", cmd_calibrate, "calibrate the synthetic model")
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=("json", "table", "csv"), default="json")
    sp = add("quantize", cmd_quantize, "run one quantized site on input tensors")
    sp.add_argument("--model", required=True)
    sp.add_argument("--site", type=int, required=True)
    sp.add_argument("--inputs", nargs=3, required=True, metavar=("X_Q", "X_K", "X_V"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--lut", choices=("exact", "hardware"))
    sp = add("eval", cmd_eval, "measure quantization error on held-out synthetic inputs")
    sp.add_argument("--model")
    sp.add_argument("--ablation", action="store_true")
    sp.add_argument("--lut", choices=("exact", "hardware"))
    sp.add_argument("--format", choices=("json", "table", "csv"), default="table")
    sp = add("lut-dump", cmd_lut_dump, "write the AGQ lookup table as a container")
    sp.add_argument("--tau", type=int, default=4)
    sp.add_argument("--bits", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp = add("report", cmd_report, "re-render a saved JSON report")
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", choices=("json", "table", "csv"), default="table")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        return args.fn(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return EX_USAGE
    except ContainerError as e:
        print(f"error: {e} (container code {e.code})", file=sys.stderr)
        return EX_IOERR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_IOERR
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_DATAERR


if __name__ == "__main__":
    sys.exit(main())
