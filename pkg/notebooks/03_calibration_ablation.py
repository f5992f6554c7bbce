# Calibrating a toy model, then switching each component off.
#
# The toy model is a stack of independent attention sites: self-attention,
# token-to-image and image-to-token, some with bimodal keys. The first and
# last sites stay in float by default.

from agquant import CalibrationConfig, calibrate, make_toy_model, quant_error_report, run_ablation, sample_inputs
from agquant.fileio import emit_ablation, emit_report

model = make_toy_model(0)
calib = sample_inputs(model, 1, 16)
held_out = sample_inputs(model, 2, 4)

cfg = CalibrationConfig(weight_bits=4, act_bits=4)
qmodel, report = calibrate(model, calib, cfg)
print(emit_report(report, "table"))
print("taus:", qmodel.taus)
print("flops ratio %.4f  storage ratio %.4f" % (report.model["flops_ratio"], report.model["storage_ratio"]))

errs = quant_error_report(model, qmodel, held_out)
print("held-out output error: %.4g" % errs["output_error"])

# the same numbers through the integer LUT path
print("held-out, LUT exact:    %.4g" % quant_error_report(model, qmodel, held_out, lut_mode="exact")["output_error"])

print()
print(emit_ablation(run_ablation(model, calib, held_out, cfg), "table"))

# at 6 bits the gap narrows
print(emit_ablation(run_ablation(model, calib, held_out, CalibrationConfig()), "table"))
