"""Noise predictors plugged into :func:`lagicd.diffusion.sample`.

Every denoiser is a callable ``(x_t, t, alpha_bar_t, condition) -> Prediction``.
"""

from __future__ import annotations

import json
import math
import os
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import DenoiserError


@dataclass
class Prediction:
    eps: np.ndarray
    var: np.ndarray | None = None
    losses: dict | None = None


class OracleDenoiser:
    """Knows the clean signal, so every ``x_0`` prediction is exact."""

    kind = "oracle"

    def __init__(self, reference):
        self.reference = np.asarray(reference, dtype=float)

    def __call__(self, x_t, t, alpha_bar_t, condition=None) -> Prediction:
        x_t = np.asarray(x_t)
        if x_t.shape != self.reference.shape:
            raise DenoiserError(f"oracle reference has shape {self.reference.shape}, "
                                f"sample has {x_t.shape}")
        eps = (x_t - math.sqrt(alpha_bar_t) * self.reference) / math.sqrt(1.0 - alpha_bar_t)
        return Prediction(eps)


class GaussianPosteriorDenoiser:
    """Exact posterior-mean denoiser for an independent Gaussian prior ``N(mean, var)``."""

    kind = "gaussian_posterior"

    def __init__(self, mean, var):
        self.mean = np.asarray(mean, dtype=float)
        self.var = np.asarray(var, dtype=float)
        if np.any(self.var < 0):
            raise ValueError("prior variance must be non-negative")

    def posterior_mean(self, x_t, alpha_bar_t):
        ab = alpha_bar_t
        return ((math.sqrt(ab) * self.var * x_t + (1.0 - ab) * self.mean)
                / (ab * self.var + 1.0 - ab))

    def __call__(self, x_t, t, alpha_bar_t, condition=None) -> Prediction:
        x_t = np.asarray(x_t, dtype=float)
        x0 = self.posterior_mean(x_t, alpha_bar_t)
        eps = (x_t - math.sqrt(alpha_bar_t) * x0) / math.sqrt(1.0 - alpha_bar_t)
        return Prediction(np.broadcast_to(eps, x_t.shape).copy())


def _write_f32(path: Path, a) -> None:
    np.ascontiguousarray(a, dtype="<f4").tofile(path)


def _read_f32(path: Path, shape) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    n = int(np.prod(shape))
    if raw.size != n:
        raise DenoiserError(f"{path.name}: expected {4 * n} bytes, got {4 * raw.size}")
    return raw.reshape(shape).astype(np.float64)


class ExternalDenoiser:
    """Runs a command once per step, exchanging raw float32 files.

    Per call the host creates a fresh directory holding ``request.json``,
    ``x.f32`` and ``cond.f32`` and runs ``command <dir>``. The plugin writes
    ``eps.f32`` and may add ``var.f32`` and ``losses.json``.
    """

    kind = "external"

    def __init__(self, command, workdir=None, timeout: float | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("external denoiser needs a command")
        exe = self.command[0]
        if shutil.which(exe) is None and not os.access(exe, os.X_OK):
            raise ValueError(f"external denoiser command {exe!r} is not executable")
        self.workdir = None if workdir is None else str(workdir)
        self.timeout = timeout

    def __call__(self, x_t, t, alpha_bar_t, condition=None) -> Prediction:
        x_t = np.asarray(x_t)
        cond = np.zeros(0) if condition is None else np.asarray(condition)
        with tempfile.TemporaryDirectory(prefix="denoise-", dir=self.workdir) as tmp:
            d = Path(tmp)
            _write_f32(d / "x.f32", x_t)
            _write_f32(d / "cond.f32", cond)
            request = {"t": int(t), "alpha_bar_t": float(alpha_bar_t), "shape": list(x_t.shape),
                       "dtype": "f32le", "x_path": "x.f32", "cond_path": "cond.f32",
                       "cond_shape": list(cond.shape)}
            (d / "request.json").write_text(json.dumps(request))
            try:
                proc = subprocess.run(self.command + [str(d)], capture_output=True, text=True,
                                      cwd=self.workdir, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise DenoiserError(f"external denoiser failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise DenoiserError(
                    f"external denoiser exited with status {proc.returncode} at t={t}; "
                    f"stderr: {proc.stderr.strip()[-2000:]}")
            if not (d / "eps.f32").exists():
                raise DenoiserError(f"external denoiser wrote no eps.f32 at t={t}")
            eps = _read_f32(d / "eps.f32", x_t.shape)
            if not np.all(np.isfinite(eps)):
                raise DenoiserError(f"external denoiser returned non-finite eps at t={t}")
            var = None
            if (d / "var.f32").exists():
                var = _read_f32(d / "var.f32", x_t.shape)
                if not np.all(np.isfinite(var)) or np.any(var < 0):
                    raise DenoiserError(f"external denoiser returned invalid var at t={t}")
            losses = None
            if (d / "losses.json").exists():
                losses = json.loads((d / "losses.json").read_text())
        return Prediction(eps, var, losses)


def make_denoiser(spec: dict, references: dict | None = None, base_dir=None):
    """Build a denoiser from a config entry.

    ``{"kind": "oracle", "reference": <key or array>}``,
    ``{"kind": "gaussian_posterior", "mean": m, "var": v}`` or
    ``{"kind": "external", "command": ..., "workdir": ...}``. Oracle
    references named by string are looked up in ``references``.
    """
    kind = spec.get("kind")
    if kind == "oracle":
        ref = spec.get("reference")
        if isinstance(ref, str):
            if references is None or ref not in references:
                raise ValueError(f"oracle reference {ref!r} is not available")
            ref = references[ref]
        if ref is None:
            raise ValueError("oracle denoiser needs a reference signal")
        return OracleDenoiser(ref)
    if kind == "gaussian_posterior":
        return GaussianPosteriorDenoiser(spec["mean"], spec["var"])
    if kind == "external":
        workdir = spec.get("workdir")
        if workdir is not None and base_dir is not None:
            workdir = str(Path(base_dir) / workdir)
        return ExternalDenoiser(spec["command"], workdir, spec.get("timeout"))
    raise ValueError(f"unknown denoiser kind {kind!r}")
