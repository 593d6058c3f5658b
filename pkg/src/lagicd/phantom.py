"""Additive ellipsoid phantoms with exact rasterization and line integrals.

Overlapping ellipsoids add their densities, so an inner structure with a
target attenuation carries ``target - enclosing`` as its additive density.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numba
import numpy as np

from .data import MU_WATER_PER_MM, Sinogram, Volume, hu_to_mu
from .geometry import ConeBeamGeometry, VolumeGrid


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple
    semi_axes_mm: tuple
    z_rotation_deg: float = 0.0
    density: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))
        object.__setattr__(self, "semi_axes_mm", tuple(float(a) for a in self.semi_axes_mm))
        if len(self.center_mm) != 3 or len(self.semi_axes_mm) != 3:
            raise ValueError("ellipsoid center and semi-axes need three components")
        if min(self.semi_axes_mm) <= 0:
            raise ValueError(f"semi-axes must be positive, got {self.semi_axes_mm}")
        if not math.isfinite(self.density):
            raise ValueError("ellipsoid density must be finite")

    def to_dict(self) -> dict:
        return {"center_mm": list(self.center_mm),
                "semi_axes_mm": list(self.semi_axes_mm),
                "z_rotation_deg": self.z_rotation_deg,
                "density": self.density}


@dataclass(frozen=True)
class PhantomSpec:
    ellipsoids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "ellipsoids", tuple(self.ellipsoids))

    def __add__(self, other: "PhantomSpec") -> "PhantomSpec":
        return PhantomSpec(self.ellipsoids + other.ellipsoids)

    def density_at(self, points) -> np.ndarray:
        """Total density at ``points`` of shape ``(..., 3)``."""
        pts = np.asarray(points, dtype=float)
        out = np.zeros(pts.shape[:-1])
        for e in self.ellipsoids:
            out += e.density * _inside(e, pts[..., 0], pts[..., 1], pts[..., 2])
        return out

    def bounding_box(self):
        """Axis-aligned (lo, hi) corners enclosing every ellipsoid."""
        if not self.ellipsoids:
            raise ValueError("empty phantom has no support")
        lo, hi = [], []
        for e in self.ellipsoids:
            a, b, c = e.semi_axes_mm
            phi = math.radians(e.z_rotation_deg)
            ex = math.hypot(a * math.cos(phi), b * math.sin(phi))
            ey = math.hypot(a * math.sin(phi), b * math.cos(phi))
            half = np.array([ex, ey, c])
            lo.append(np.array(e.center_mm) - half)
            hi.append(np.array(e.center_mm) + half)
        return np.min(lo, axis=0), np.max(hi, axis=0)

    def to_json(self) -> str:
        return json.dumps({"ellipsoids": [e.to_dict() for e in self.ellipsoids]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        raw = json.loads(text)
        return cls(tuple(Ellipsoid(**e) for e in raw["ellipsoids"]))


def _inside(e: Ellipsoid, x, y, z):
    cx, cy, cz = e.center_mm
    a, b, c = e.semi_axes_mm
    phi = math.radians(e.z_rotation_deg)
    cp, sp = math.cos(phi), math.sin(phi)
    dx, dy, dz = x - cx, y - cy, z - cz
    # rotate into the ellipsoid frame (inverse z rotation)
    lx = cp * dx + sp * dy
    ly = -sp * dx + cp * dy
    return (lx / a) ** 2 + (ly / b) ** 2 + (dz / c) ** 2 <= 1.0


def _ellipsoid_table(p: PhantomSpec) -> np.ndarray:
    """Rows of (cx, cy, cz, a, b, c, cos, sin, density) for the kernels."""
    rows = []
    for e in p.ellipsoids:
        phi = math.radians(e.z_rotation_deg)
        rows.append([*e.center_mm, *e.semi_axes_mm, math.cos(phi), math.sin(phi), e.density])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 9)


@numba.njit(cache=True)
def _chord(row, ox, oy, oz, dx, dy, dz):
    cx, cy, cz, a, b, c, cp, sp = row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7]
    rx, ry, rz = ox - cx, oy - cy, oz - cz
    # origin and direction in unit-sphere coordinates
    qx = (cp * rx + sp * ry) / a
    qy = (-sp * rx + cp * ry) / b
    qz = rz / c
    wx = (cp * dx + sp * dy) / a
    wy = (-sp * dx + cp * dy) / b
    wz = dz / c
    aa = wx * wx + wy * wy + wz * wz
    tc = -(qx * wx + qy * wy + qz * wz) / aa
    px, py, pz = qx + tc * wx, qy + tc * wy, qz + tc * wz
    gap = 1.0 - (px * px + py * py + pz * pz)
    if gap <= 0.0:
        return 0.0
    half = math.sqrt(gap / aa)
    t1 = max(tc - half, 0.0)
    t2 = tc + half
    return t2 - t1 if t2 > t1 else 0.0


def chord_length(e: Ellipsoid, ray_origin, ray_dir) -> float:
    """Length (mm) of the ray ``origin + t*dir, t >= 0`` inside ``e``."""
    d = np.asarray(ray_dir, dtype=float)
    if abs(1.0 - np.linalg.norm(d)) >= 1e-9:
        raise ValueError("ray direction must be a unit vector")
    o = np.asarray(ray_origin, dtype=float)
    row = _ellipsoid_table(PhantomSpec((e,)))[0]
    return float(_chord(row, o[0], o[1], o[2], d[0], d[1], d[2]))


@numba.njit(cache=True)
def _project_kernel(table, src, axis, uvec, u_coords, v_coords, sdd, out):
    n_views, n_rows, n_cols = out.shape
    for k in range(n_views):
        sx, sy, sz = src[k, 0], src[k, 1], src[k, 2]
        for r in range(n_rows):
            for c in range(n_cols):
                px = sx + sdd * axis[k, 0] + u_coords[c] * uvec[k, 0]
                py = sy + sdd * axis[k, 1] + u_coords[c] * uvec[k, 1]
                pz = sz + sdd * axis[k, 2] + v_coords[r]
                dx, dy, dz = px - sx, py - sy, pz - sz
                norm = math.sqrt(dx * dx + dy * dy + dz * dz)
                dx /= norm
                dy /= norm
                dz /= norm
                acc = 0.0
                for e in range(table.shape[0]):
                    acc += table[e, 8] * _chord(table[e], sx, sy, sz, dx, dy, dz)
                out[k, r, c] = acc


def analytic_project(p: PhantomSpec, geom: ConeBeamGeometry) -> Sinogram:
    """Exact cone-beam line integrals of an ellipsoid phantom."""
    out = np.zeros((geom.n_views, geom.det_rows, geom.det_cols))
    table = _ellipsoid_table(p)
    if table.shape[0]:
        src, axis, uvec = geom.view_frames()
        _project_kernel(table, src, axis, uvec, geom.u_coords(), geom.v_coords(),
                        geom.sdd_mm, out)
    return Sinogram(geom, out, "line_integral")


def rasterize(p: PhantomSpec, grid: VolumeGrid, supersample: int = 2) -> Volume:
    """Mean phantom density over ``supersample**3`` sub-points per voxel."""
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    xs, ys, zs = (grid.axis_coords(i) for i in range(3))
    offsets = [((np.arange(supersample) + 0.5) / supersample - 0.5) * grid.spacing_mm[i]
               for i in range(3)]
    out = np.zeros(grid.shape)
    for e in p.ellipsoids:
        # integer hit counts keep fully covered voxels exact
        hits = np.zeros(grid.shape, dtype=np.int64)
        for oz in offsets[2]:
            z = (zs + oz)[:, None, None]
            for oy in offsets[1]:
                y = (ys + oy)[None, :, None]
                for ox in offsets[0]:
                    hits += _inside(e, (xs + ox)[None, None, :], y, z)
        out += e.density * (hits / supersample ** 3)
    return Volume(grid, out, "mu_per_mm")


# Target attenuation of each pelvis-like structure, in HU.
PELVIS_HU = {
    "body": 0.0,
    "bone": 1000.0,
    "bladder": 40.0,
    "uterus": -60.0,
    "applicator": 2000.0,
}
PELVIS_MU = {name: float(hu_to_mu(hu)) for name, hu in PELVIS_HU.items()}


def make_pelvis_like_phantom() -> PhantomSpec:
    """Water body with two bones, two low-contrast organs and an applicator rod."""
    body = PELVIS_MU["body"]
    return PhantomSpec((
        Ellipsoid((0.0, 0.0, 0.0), (170.0, 115.0, 100.0), 0.0, body),
        Ellipsoid((-105.0, -10.0, 0.0), (32.0, 28.0, 60.0), 0.0, PELVIS_MU["bone"] - body),
        Ellipsoid((105.0, -10.0, 0.0), (32.0, 28.0, 60.0), 0.0, PELVIS_MU["bone"] - body),
        Ellipsoid((0.0, 45.0, 10.0), (45.0, 35.0, 40.0), 0.0, PELVIS_MU["bladder"] - body),
        Ellipsoid((0.0, -40.0, 0.0), (30.0, 22.0, 45.0), 20.0, PELVIS_MU["uterus"] - body),
        Ellipsoid((8.0, -40.0, 0.0), (6.0, 6.0, 30.0), 0.0, PELVIS_MU["applicator"] - PELVIS_MU["uterus"]),
    ))


def make_sphere_phantom(radius_mm: float = 150.0, density: float = MU_WATER_PER_MM,
                        center_mm=(0.0, 0.0, 0.0)) -> PhantomSpec:
    return PhantomSpec((Ellipsoid(center_mm, (radius_mm,) * 3, 0.0, density),))
