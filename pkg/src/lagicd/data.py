"""Volume and sinogram containers shared by every stage."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import ConeBeamGeometry, VolumeGrid

VOLUME_UNITS = ("mu_per_mm", "hu", "normalized")
SINOGRAM_UNITS = ("line_integral", "normalized")

# Linear attenuation of water used for the HU mapping of phantom data.
MU_WATER_PER_MM = 0.02


class UnitsError(ValueError):
    pass


def mu_to_hu(mu):
    return 1000.0 * (np.asarray(mu, dtype=float) - MU_WATER_PER_MM) / MU_WATER_PER_MM


def hu_to_mu(hu):
    return MU_WATER_PER_MM * (1.0 + np.asarray(hu, dtype=float) / 1000.0)


def _check_range(norm_range, units):
    if units == "normalized":
        if norm_range is None:
            raise UnitsError("normalized data needs a norm_range")
        lo, hi = norm_range
        if not hi > lo:
            raise UnitsError(f"norm_range needs hi > lo, got {norm_range}")
        return (float(lo), float(hi))
    return None if norm_range is None else tuple(float(v) for v in norm_range)


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar field; ``data`` has shape ``(nz, ny, nx)``.

    For ``units="normalized"`` the ``norm_range`` holds the HU interval that
    maps onto [-1, 1].
    """

    grid: VolumeGrid
    data: np.ndarray
    units: str = "mu_per_mm"
    norm_range: tuple | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.grid.shape:
            raise ValueError(f"volume data shape {data.shape} does not match grid {self.grid.shape}")
        if self.units not in VOLUME_UNITS:
            raise UnitsError(f"unknown volume units {self.units!r}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "norm_range", _check_range(self.norm_range, self.units))

    def require(self, units: str) -> None:
        if self.units != units:
            raise UnitsError(f"expected volume in {units}, got {self.units}")

    def with_data(self, data, units: str | None = None, norm_range=None) -> "Volume":
        units = self.units if units is None else units
        if norm_range is None and units == self.units:
            norm_range = self.norm_range
        return Volume(self.grid, data, units, norm_range)

    def to_hu(self) -> "Volume":
        if self.units == "hu":
            return self
        if self.units == "mu_per_mm":
            return Volume(self.grid, mu_to_hu(self.data), "hu")
        lo, hi = self.norm_range
        return Volume(self.grid, lo + (self.data + 1.0) * 0.5 * (hi - lo), "hu")

    def to_mu(self) -> "Volume":
        if self.units == "mu_per_mm":
            return self
        return Volume(self.grid, hu_to_mu(self.to_hu().data), "mu_per_mm")


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Stack of detector images; ``data`` has shape ``(views, rows, cols)``."""

    geom: ConeBeamGeometry
    data: np.ndarray
    units: str = "line_integral"
    norm_range: tuple | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        g = self.geom
        expected = (g.n_views, g.det_rows, g.det_cols)
        if data.shape != expected:
            raise ValueError(f"sinogram data shape {data.shape} does not match geometry {expected}")
        if self.units not in SINOGRAM_UNITS:
            raise UnitsError(f"unknown sinogram units {self.units!r}")
        if not np.all(np.isfinite(data)):
            raise ValueError("sinogram data must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "norm_range", _check_range(self.norm_range, self.units))

    def require(self, units: str) -> None:
        if self.units != units:
            raise UnitsError(f"expected sinogram in {units}, got {self.units}")

    def with_data(self, data, units: str | None = None, norm_range=None) -> "Sinogram":
        units = self.units if units is None else units
        if norm_range is None and units == self.units:
            norm_range = self.norm_range
        return Sinogram(self.geom, data, units, norm_range)

    def replace_geom(self, geom: ConeBeamGeometry, data) -> "Sinogram":
        return replace(self, geom=geom, data=data)


def select_arc(sino: Sinogram, start_deg: float, end_deg: float) -> Sinogram:
    """Keep the views whose angle lies in the half-open arc ``[start, end)``."""
    from .geometry import arc_indices

    idx = arc_indices(sino.geom.angles_deg, start_deg, end_deg)
    angles = [sino.geom.angles_deg[i] for i in idx]
    return sino.replace_geom(sino.geom.with_angles(angles), sino.data[idx])
