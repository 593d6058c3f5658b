"""Test plugin: ``plugin_denoiser.py <mode> <ref.f32> <workdir>``.

Returns the oracle noise for the reference in ``ref.f32``; ``mode`` selects
well-formed or deliberately broken behaviour.
"""
import json
import math
import sys
from pathlib import Path

import numpy as np

mode, ref_path, work = sys.argv[1], sys.argv[2], Path(sys.argv[3])
req = json.loads((work / "request.json").read_text())
shape = tuple(req["shape"])
x = np.fromfile(work / req["x_path"], dtype="<f4").reshape(shape).astype(float)
ref = np.fromfile(ref_path, dtype="<f4").reshape(shape).astype(float)
ab = req["alpha_bar_t"]
eps = (x - math.sqrt(ab) * ref) / math.sqrt(1 - ab)

if mode == "fail":
    sys.stderr.write("plugin exploded\n")
    sys.exit(3)
if mode == "missing":
    sys.exit(0)
if mode == "short":
    eps = eps.ravel()[:-1]
if mode == "nan":
    eps[...] = np.nan
eps.astype("<f4").tofile(work / "eps.f32")
if mode == "var":
    np.zeros(shape, dtype="<f4").tofile(work / "var.f32")
if mode == "losses":
    (work / "losses.json").write_text(json.dumps({"l_mu": 0.25, "l_sigma": 0.5}))
(work / "seen_cond_shape.json").write_text(json.dumps(req["cond_shape"]))
