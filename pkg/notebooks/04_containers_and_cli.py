# Tensor files, saved models and the command line.
#
# Tensors travel in a small binary container: a magic tag, version, dtype,
# bit-width, rank, little-endian dims and a raw payload. The command line
# reads and writes these files; run it with `agquant --help` or
# `python -m agquant --help`.

import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from agquant.fileio import decode_tensor, encode_tensor, read_tensor
from agquant.tensor import IntTensor

x = np.arange(6, dtype=np.float32).reshape(2, 3)
buf = encode_tensor(x)
print(len(buf), "bytes; header", buf[:4], "; back:", decode_tensor(buf).tolist())

codes = IntTensor(np.array([[0, 15], [3, 9]], dtype=np.uint8), bits=4)
print("int codes round-trip:", decode_tensor(encode_tensor(codes)))

work = Path(tempfile.mkdtemp())
(work / "run.ini").write_text(
    "[run]\nseed = 7\neval_samples = 2\n\n"
    "[calibration]\nweight_bits = 4\nact_bits = 4\nnum_samples = 8\n\n"
    "[synthetic]\nregime = bimodal_key\ntokens_k = 256\n"
)


def cli(*args):
    proc = subprocess.run([sys.executable, "-m", "agquant", *args], capture_output=True, text=True)
    print("$ agquant", " ".join(args), "->", proc.returncode)
    print(proc.stdout.rstrip() or proc.stderr.rstrip())
    return proc


ini = str(work / "run.ini")
cli("gen", "--config", ini, "--out", str(work / "gen"))
cli("discriminate", "--config", ini, "--input", str(work / "gen" / "k_act.ptqt"), "--detector", "both")
cli("calibrate", "--config", ini, "--out", str(work / "cal"), "--format", "table")
cli("eval", "--config", ini, "--model", str(work / "cal" / "model"))
cli("lut-dump", "--tau", "4", "--bits", "8", "--out", str(work / "lut.ptqt"))
print("lut shape:", read_tensor(work / "lut.ptqt").shape)

# errors: usage 64, bad data 65, I/O 74
cli("calibrate")
cli("discriminate", "--input", str(work / "missing.ptqt"))
