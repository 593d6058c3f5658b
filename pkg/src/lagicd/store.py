"""Raw little-endian float32 volume/sinogram files with a JSON header.

Layout: one line of compact JSON terminated by ``\\n``, immediately followed
by the payload. Volumes store x fastest, then y, then z; sinograms store
column fastest, then row, then view. Writes go to a temporary file in the
target directory and are renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SINOGRAM_UNITS, VOLUME_UNITS, Sinogram, Volume
from .geometry import ConeBeamGeometry, VolumeGrid

MAX_HEADER_BYTES = 1 << 24


class StoreError(ValueError):
    pass


def _atomic_write(path, chunks) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write(path, header: dict, data: np.ndarray) -> None:
    head = json.dumps(header, separators=(",", ":")).encode() + b"\n"
    _atomic_write(path, [head, np.ascontiguousarray(data, dtype="<f4").tobytes()])


def _read(path):
    raw = Path(path).read_bytes()
    end = raw.find(b"\n", 0, MAX_HEADER_BYTES)
    if end < 0:
        raise StoreError(f"{path}: no header terminator within the first {MAX_HEADER_BYTES} bytes")
    try:
        header = json.loads(raw[:end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreError(f"{path}: malformed JSON header in bytes 0..{end}: {exc}") from None
    if not isinstance(header, dict):
        raise StoreError(f"{path}: header is not a JSON object")
    return header, raw, end + 1


def _payload(path, raw: bytes, offset: int, shape) -> np.ndarray:
    expected = 4 * int(np.prod(shape))
    actual = len(raw) - offset
    if actual != expected:
        raise StoreError(f"{path}: payload at byte offset {offset} should be {expected} bytes "
                         f"for shape {tuple(shape)}, found {actual}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float64)


def _units(path, header, allowed):
    units = header.get("units")
    if units not in allowed:
        raise StoreError(f"{path}: unknown units {units!r}; expected one of {list(allowed)}")
    return units


def write_volume(vol: Volume, path) -> None:
    g = vol.grid
    header = {"type": "volume", "dims": [g.nx, g.ny, g.nz], "spacing_mm": list(g.spacing_mm),
              "origin_mm": list(g.origin_mm), "units": vol.units}
    if vol.units == "normalized":
        header["norm_range"] = list(vol.norm_range)
    _write(path, header, vol.data)


def read_volume(path) -> Volume:
    header, raw, offset = _read(path)
    if header.get("type") != "volume":
        raise StoreError(f"{path}: header type is {header.get('type')!r}, not 'volume'")
    units = _units(path, header, VOLUME_UNITS)
    try:
        nx, ny, nz = (int(n) for n in header["dims"])
        grid = VolumeGrid(nx, ny, nz, header["spacing_mm"], header["origin_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreError(f"{path}: bad volume header: {exc}") from None
    data = _payload(path, raw, offset, grid.shape)
    return Volume(grid, data, units, header.get("norm_range"))


def write_sinogram(sino: Sinogram, path) -> None:
    g = sino.geom
    header = {"type": "sinogram", "views": g.n_views, "rows": g.det_rows, "cols": g.det_cols,
              "geometry": g.to_dict(), "units": sino.units}
    if sino.units == "normalized":
        header["norm_range"] = list(sino.norm_range)
    _write(path, header, sino.data)


def read_sinogram(path) -> Sinogram:
    header, raw, offset = _read(path)
    if header.get("type") != "sinogram":
        raise StoreError(f"{path}: header type is {header.get('type')!r}, not 'sinogram'")
    units = _units(path, header, SINOGRAM_UNITS)
    try:
        geom = ConeBeamGeometry.from_dict(header["geometry"])
        shape = (int(header["views"]), int(header["rows"]), int(header["cols"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreError(f"{path}: bad sinogram header: {exc}") from None
    if shape != (geom.n_views, geom.det_rows, geom.det_cols):
        raise StoreError(f"{path}: header shape {shape} disagrees with its geometry")
    data = _payload(path, raw, offset, shape)
    return Sinogram(geom, data, units, header.get("norm_range"))


AXES = ("axial", "coronal", "sagittal")


def slice_of(vol: Volume, axis: str, index: int) -> np.ndarray:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    n = {"axial": vol.grid.nz, "coronal": vol.grid.ny, "sagittal": vol.grid.nx}[axis]
    if not 0 <= index < n:
        raise IndexError(f"{axis} index {index} outside [0, {n})")
    if axis == "axial":
        return vol.data[index]
    if axis == "coronal":
        return vol.data[:, index, :]
    return vol.data[:, :, index]


def window_to_gray(values: np.ndarray, center: float, width: float) -> np.ndarray:
    lo = center - width / 2.0
    g = np.clip((values - lo) / width, 0.0, 1.0) * 255.0
    return np.round(g).astype(np.uint8)


def export_slice_png(vol: Volume, axis: str, index: int, window, path) -> None:
    """8-bit grayscale PNG of one slice with a linear window ``(center, width)``.

    Window values are in the volume's HU scale; mu and normalized volumes
    are converted first.
    """
    center, width = window
    if not width > 0:
        raise ValueError("window width must be positive")
    img = window_to_gray(slice_of(vol.to_hu(), axis, index), center, width)
    if axis != "axial":
        img = img[::-1]  # superior at the top
    buf = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{buf.name}.", suffix=".png", dir=buf.parent or ".")
    os.close(fd)
    try:
        Image.fromarray(img, mode="L").save(tmp, format="PNG")
        os.replace(tmp, buf)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
