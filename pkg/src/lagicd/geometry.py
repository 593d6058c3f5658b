"""Circular cone-beam scanner geometry and reconstruction grids.

Coordinate conventions (patient frame, millimetres):

* isocenter at the origin, rotation axis along +z;
* view angle 0 deg puts the source on the +y axis;
* ``rotation_sense="clockwise"`` means the source moves towards +x as the
  angle increases, i.e. the mathematical angle decreases when viewed from +z;
* the flat panel sits opposite the source, perpendicular to the central ray;
  detector ``u`` (columns) is ``e_z x d`` for central-ray direction ``d`` and
  detector ``v`` (rows) is +z;
* pixel ``(row, col)`` sits at ``u = (col - (cols-1)/2) * du`` and
  ``v = (row - (rows-1)/2) * dv``, so the central ray hits the geometric
  panel centre (a pixel centre only for odd counts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CLOCKWISE = "clockwise"
COUNTERCLOCKWISE = "counterclockwise"
ROTATION_SENSES = (CLOCKWISE, COUNTERCLOCKWISE)

# Sign applied to sin(angle) for the source x-coordinate.
_SENSE_SIGN = {CLOCKWISE: 1.0, COUNTERCLOCKWISE: -1.0}

RECON_DIAMETER_MM = 495.0


class GeometryError(ValueError):
    """Raised for non-physical geometry parameters or bad arc selections."""


def _angle_list(angles) -> tuple:
    return tuple(float(a) for a in angles)


@dataclass(frozen=True)
class ConeBeamGeometry:
    sdd_mm: float
    sid_mm: float
    det_rows: int
    det_cols: int
    det_spacing_u_mm: float
    det_spacing_v_mm: float
    angles_deg: tuple
    rotation_sense: str = CLOCKWISE

    def __post_init__(self):
        object.__setattr__(self, "angles_deg", _angle_list(self.angles_deg))
        if not (self.sdd_mm > self.sid_mm > 0):
            raise GeometryError(
                f"need sdd_mm > sid_mm > 0, got sdd={self.sdd_mm}, sid={self.sid_mm}")
        if self.det_rows < 1 or self.det_cols < 1:
            raise GeometryError("detector needs at least one row and one column")
        if not (self.det_spacing_u_mm > 0 and self.det_spacing_v_mm > 0):
            raise GeometryError("detector spacings must be positive")
        if self.rotation_sense not in ROTATION_SENSES:
            raise GeometryError(f"unknown rotation_sense {self.rotation_sense!r}")
        a = np.asarray(self.angles_deg, dtype=float)
        if a.size == 0:
            raise GeometryError("geometry needs at least one view angle")
        if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a >= 360):
            raise GeometryError("view angles must lie in [0, 360)")
        if np.any(np.diff(a) <= 0):
            raise GeometryError("view angles must be strictly increasing")

    @property
    def n_views(self) -> int:
        return len(self.angles_deg)

    @property
    def magnification(self) -> float:
        return self.sdd_mm / self.sid_mm

    @property
    def angular_step_rad(self) -> float:
        """Mean angular spacing between views; 2*pi for a single view."""
        a = self.angles_deg
        if len(a) < 2:
            return 2 * math.pi
        return math.radians((a[-1] - a[0]) / (len(a) - 1))

    def with_angles(self, angles_deg) -> "ConeBeamGeometry":
        return ConeBeamGeometry(
            sdd_mm=self.sdd_mm, sid_mm=self.sid_mm,
            det_rows=self.det_rows, det_cols=self.det_cols,
            det_spacing_u_mm=self.det_spacing_u_mm,
            det_spacing_v_mm=self.det_spacing_v_mm,
            angles_deg=angles_deg, rotation_sense=self.rotation_sense)

    def u_coords(self) -> np.ndarray:
        """Signed transaxial offsets of column centres (mm)."""
        return (np.arange(self.det_cols) - (self.det_cols - 1) / 2.0) * self.det_spacing_u_mm

    def v_coords(self) -> np.ndarray:
        """Signed axial offsets of row centres (mm)."""
        return (np.arange(self.det_rows) - (self.det_rows - 1) / 2.0) * self.det_spacing_v_mm

    def view_frames(self):
        """Per-view source position, central-ray direction and detector u axis.

        Returns three ``(n_views, 3)`` float64 arrays.
        """
        th = np.radians(np.asarray(self.angles_deg))
        sgn = _SENSE_SIGN[self.rotation_sense]
        s, c = np.sin(th), np.cos(th)
        zero = np.zeros_like(th)
        src = self.sid_mm * np.stack([sgn * s, c, zero], axis=1)
        d = -np.stack([sgn * s, c, zero], axis=1)
        # u = e_z x d
        u = np.stack([-d[:, 1], d[:, 0], zero], axis=1)
        return src, d, u

    def to_dict(self) -> dict:
        return {
            "sdd_mm": self.sdd_mm,
            "sid_mm": self.sid_mm,
            "det_rows": self.det_rows,
            "det_cols": self.det_cols,
            "det_spacing_u_mm": self.det_spacing_u_mm,
            "det_spacing_v_mm": self.det_spacing_v_mm,
            "angles_deg": list(self.angles_deg),
            "rotation_sense": self.rotation_sense,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBeamGeometry":
        try:
            return cls(
                sdd_mm=float(d["sdd_mm"]), sid_mm=float(d["sid_mm"]),
                det_rows=int(d["det_rows"]), det_cols=int(d["det_cols"]),
                det_spacing_u_mm=float(d["det_spacing_u_mm"]),
                det_spacing_v_mm=float(d["det_spacing_v_mm"]),
                angles_deg=d["angles_deg"],
                rotation_sense=d.get("rotation_sense", CLOCKWISE))
        except KeyError as exc:
            raise GeometryError(f"geometry JSON missing field {exc}") from None


@dataclass(frozen=True)
class VolumeGrid:
    """Regular voxel grid; ``origin_mm`` is the centre of voxel (0, 0, 0)."""

    nx: int
    ny: int
    nz: int
    spacing_mm: tuple
    origin_mm: tuple

    def __post_init__(self):
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))
        if min(self.nx, self.ny, self.nz) < 1:
            raise GeometryError("grid counts must be >= 1")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise GeometryError("grid spacings must be three positive numbers")
        if len(self.origin_mm) != 3:
            raise GeometryError("grid origin must have three coordinates")

    @classmethod
    def centered(cls, shape, spacing_mm) -> "VolumeGrid":
        """Grid of ``shape = (nx, ny, nz)`` whose centre is the isocenter."""
        nx, ny, nz = (int(n) for n in shape)
        if np.isscalar(spacing_mm):
            spacing_mm = (spacing_mm,) * 3
        origin = tuple(-(n - 1) / 2.0 * s for n, s in zip((nx, ny, nz), spacing_mm))
        return cls(nx, ny, nz, tuple(spacing_mm), origin)

    @property
    def shape(self) -> tuple:
        """Array shape of volume data, ``(nz, ny, nx)`` (x fastest)."""
        return (self.nz, self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def diameter_mm(self) -> float:
        return self.nx * self.spacing_mm[0]

    def axis_coords(self, axis: int) -> np.ndarray:
        n = (self.nx, self.ny, self.nz)[axis]
        return self.origin_mm[axis] + np.arange(n) * self.spacing_mm[axis]

    def to_dict(self) -> dict:
        return {"dims": [self.nx, self.ny, self.nz],
                "spacing_mm": list(self.spacing_mm),
                "origin_mm": list(self.origin_mm)}

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeGrid":
        dims = d["dims"]
        if "origin_mm" in d:
            return cls(*dims, spacing_mm=d["spacing_mm"], origin_mm=d["origin_mm"])
        return cls.centered(dims, d["spacing_mm"])


def _uniform_angles(n_views: int, step_deg: float) -> tuple:
    return tuple(i * step_deg for i in range(n_views))


PRESETS = {
    "paper": dict(sdd_mm=1500.0, sid_mm=1000.0, det_rows=768, det_cols=1024,
                  det_spacing_u_mm=0.78, det_spacing_v_mm=0.78,
                  n_views=360, step_deg=1.0),
    # 8x coarser pitch keeps the transaxial field of view and SDD/SID = 1.5.
    "desk": dict(sdd_mm=1500.0, sid_mm=1000.0, det_rows=96, det_cols=128,
                 det_spacing_u_mm=6.24, det_spacing_v_mm=6.24,
                 n_views=180, step_deg=2.0),
}


def make_geometry(preset: str | None = None, **params) -> ConeBeamGeometry:
    """Build a geometry from a named preset or explicit parameters.

    Explicit keyword arguments override preset values. ``n_views`` and
    ``step_deg`` may be given instead of ``angles_deg``.
    """
    if preset is not None:
        if preset not in PRESETS:
            raise GeometryError(f"unknown geometry preset {preset!r}; "
                                f"choose from {sorted(PRESETS)}")
        base = dict(PRESETS[preset])
        base.update(params)
        params = base
    params = dict(params)
    n_views = params.pop("n_views", None)
    step_deg = params.pop("step_deg", None)
    params.setdefault("rotation_sense", CLOCKWISE)
    if "angles_deg" not in params:
        if n_views is None or step_deg is None:
            raise GeometryError("need angles_deg or n_views and step_deg")
        params["angles_deg"] = _uniform_angles(int(n_views), float(step_deg))
    required = ("sdd_mm", "sid_mm", "det_rows", "det_cols",
                "det_spacing_u_mm", "det_spacing_v_mm")
    missing = [k for k in required if k not in params]
    if missing:
        raise GeometryError(f"missing geometry parameters: {missing}")
    return ConeBeamGeometry(**params)


def desk_grid(n: int = 64, diameter_mm: float = RECON_DIAMETER_MM) -> VolumeGrid:
    """Isotropic ``n^3`` grid spanning the reconstruction diameter."""
    return VolumeGrid.centered((n, n, n), diameter_mm / n)


def source_position(geom: ConeBeamGeometry, angle_deg: float) -> np.ndarray:
    th = math.radians(angle_deg)
    sgn = _SENSE_SIGN[geom.rotation_sense]
    return np.array([sgn * geom.sid_mm * math.sin(th), geom.sid_mm * math.cos(th), 0.0])


def detector_pixel_position(geom: ConeBeamGeometry, angle_deg: float,
                            row: int, col: int) -> np.ndarray:
    if not (0 <= row < geom.det_rows and 0 <= col < geom.det_cols):
        raise GeometryError(
            f"pixel ({row}, {col}) outside {geom.det_rows}x{geom.det_cols} detector")
    src = source_position(geom, angle_deg)
    d = -src / geom.sid_mm
    u_axis = np.array([-d[1], d[0], 0.0])
    u = (col - (geom.det_cols - 1) / 2.0) * geom.det_spacing_u_mm
    v = (row - (geom.det_rows - 1) / 2.0) * geom.det_spacing_v_mm
    return src + geom.sdd_mm * d + u * u_axis + np.array([0.0, 0.0, v])


def arc_indices(angles_deg: Sequence[float], start_deg: float, end_deg: float) -> np.ndarray:
    """Indices of angles in the half-open arc ``[start, end)``."""
    if not start_deg < end_deg:
        raise GeometryError(f"arc needs start < end, got [{start_deg}, {end_deg})")
    a = np.asarray(angles_deg, dtype=float)
    if start_deg < a[0] or end_deg > a[-1] + _coverage_step(a):
        raise GeometryError(
            f"arc [{start_deg}, {end_deg}) not covered by views "
            f"[{a[0]}, {a[-1]}]")
    idx = np.nonzero((a >= start_deg) & (a < end_deg))[0]
    if idx.size == 0:
        raise GeometryError(f"arc [{start_deg}, {end_deg}) selects no views")
    return idx


def _coverage_step(a: np.ndarray) -> float:
    # The last view of an evenly sampled scan covers one step beyond itself.
    return float(a[-1] - a[-2]) if a.size > 1 else 0.0
