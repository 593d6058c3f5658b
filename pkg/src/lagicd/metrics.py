"""Image-quality metrics: body mask, MAE in HU, slice-wise SSIM and PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import Volume

DEFAULT_BODY_THRESHOLD_HU = -500.0


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    mae_hu: float
    ssim: float
    psnr_db: float
    mask_voxels: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        psnr = self.psnr_db if math.isfinite(self.psnr_db) else "inf"
        return {"mae_hu": self.mae_hu, "ssim": self.ssim, "psnr_db": psnr,
                "mask_voxels": self.mask_voxels, "metadata": dict(self.metadata)}


def _values(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=float)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"grid mismatch: {a.shape} vs {b.shape}")


def body_mask(truth, threshold_hu: float = DEFAULT_BODY_THRESHOLD_HU) -> np.ndarray:
    """Largest 6-connected component of voxels above ``threshold_hu``."""
    if isinstance(truth, Volume):
        truth.require("hu")
    x = _values(truth)
    labels, n = ndimage.label(x > threshold_hu)
    if n == 0:
        raise MetricError(f"no voxel exceeds {threshold_hu} HU; body mask is empty")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def mae_hu(recon, truth, mask=None) -> float:
    a, b = _values(recon), _values(truth)
    _same_shape(a, b)
    diff = np.abs(a - b)
    if mask is None:
        return float(diff.mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("empty mask")
    return float(diff[mask].mean())


def _ssim_slices(a: np.ndarray, b: np.ndarray, window: int, c1: float, c2: float,
                 gaussian: bool):
    """SSIM maps over valid windows for each axial slice, shape (nz, ny-w+1, nx-w+1)."""
    def local_mean(x):
        if gaussian:
            return ndimage.gaussian_filter(x, sigma=(0, 1.5, 1.5), truncate=(window // 2) / 1.5,
                                           mode="constant")
        return ndimage.uniform_filter(x, size=(1, window, window), mode="constant")

    h = window // 2
    crop = (slice(None), slice(h, a.shape[1] - h), slice(h, a.shape[2] - h))
    mu_a = local_mean(a)[crop]
    mu_b = local_mean(b)[crop]
    var_a = local_mean(a * a)[crop] - mu_a ** 2
    var_b = local_mean(b * b)[crop] - mu_b ** 2
    cov = local_mean(a * b)[crop] - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum * cs, crop


def ssim(recon, truth, window: int = 11, k1: float = 0.01, k2: float = 0.03,
         dynamic_range: float | None = None, mask=None, gaussian: bool = False) -> float:
    """Mean SSIM over axial slices with ``window x window`` uniform windows.

    Each slice averages its valid windows; the result averages slices. With
    ``mask`` only windows centred on masked voxels count and slices without
    any such window are skipped. ``gaussian=True`` swaps the uniform window
    for a sigma-1.5 Gaussian truncated to the same footprint.
    """
    a, b = _values(recon), _values(truth)
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
        if mask is not None:
            mask = np.asarray(mask)[None]
    if a.shape[1] < window or a.shape[2] < window:
        raise MetricError(f"slice {a.shape[1:]} smaller than {window}x{window} window")
    if dynamic_range is None:
        dynamic_range = float(b.max() - b.min())
    if not dynamic_range > 0:
        raise MetricError("dynamic_range must be positive")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    smap, crop = _ssim_slices(a, b, window, c1, c2, gaussian)
    if mask is None:
        return float(smap.mean(axis=(1, 2)).mean())
    m = np.asarray(mask, dtype=bool)[crop]
    per_slice = [smap[i][m[i]].mean() for i in range(smap.shape[0]) if m[i].any()]
    if not per_slice:
        raise MetricError("mask selects no complete SSIM window")
    return float(np.mean(per_slice))


def psnr_db(recon, truth, dynamic_range: float | None = None, mask=None) -> float:
    a, b = _values(recon), _values(truth)
    _same_shape(a, b)
    if dynamic_range is None:
        dynamic_range = float(b.max() - b.min())
    diff = a - b
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    rmse = math.sqrt(float(np.mean(diff ** 2)))
    if rmse == 0.0:
        return math.inf
    return 20.0 * math.log10(dynamic_range / rmse)


def evaluate(recon: Volume, truth: Volume, threshold_hu: float = DEFAULT_BODY_THRESHOLD_HU,
             masked: bool = False) -> MetricReport:
    """All three metrics on HU volumes; ``masked`` restricts SSIM/PSNR to the body."""
    r, t = recon.to_hu(), truth.to_hu()
    mask = body_mask(t, threshold_hu)
    dyn = float(t.data.max() - t.data.min())
    sel = mask if masked else None
    return MetricReport(
        mae_hu=mae_hu(r, t, mask),
        ssim=ssim(r, t, dynamic_range=dyn, mask=sel),
        psnr_db=psnr_db(r, t, dynamic_range=dyn, mask=sel),
        mask_voxels=int(mask.sum()),
        metadata={"dynamic_range_hu": dyn, "threshold_hu": threshold_hu,
                  "masked": masked, "window": 11},
    )
