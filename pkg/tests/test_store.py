import json

import numpy as np
import pytest
from PIL import Image

from lagicd.data import Sinogram, Volume
from lagicd.geometry import desk_grid, make_geometry
from lagicd.store import (StoreError, export_slice_png, read_sinogram, read_volume, window_to_gray,
                          write_sinogram, write_volume)


def random_volume(rng, units="hu", n=16):
    grid = desk_grid(n)
    data = rng.uniform(-1000, 2000, grid.shape).astype(np.float32).astype(float)
    norm = (-1000.0, 2000.0) if units == "normalized" else None
    return Volume(grid, data, units, norm)


@pytest.mark.parametrize("units", ["mu_per_mm", "hu", "normalized"])
def test_volume_round_trip_bit_identical(tmp_path, rng, units):
    vol = random_volume(rng, units)
    write_volume(vol, tmp_path / "a.vol")
    back = read_volume(tmp_path / "a.vol")
    assert back.grid == vol.grid and back.units == vol.units and back.norm_range == vol.norm_range
    assert back.data.tobytes() == vol.data.tobytes()
    write_volume(back, tmp_path / "b.vol")
    assert (tmp_path / "a.vol").read_bytes() == (tmp_path / "b.vol").read_bytes()


def test_volume_layout_is_x_fastest(tmp_path):
    grid = desk_grid(2)
    data = np.arange(8, dtype=float).reshape(grid.shape)
    write_volume(Volume(grid, data, "hu"), tmp_path / "v.vol")
    raw = (tmp_path / "v.vol").read_bytes()
    payload = np.frombuffer(raw[raw.index(b"\n") + 1:], dtype="<f4")
    np.testing.assert_array_equal(payload, np.arange(8))
    header = json.loads(raw[:raw.index(b"\n")])
    assert header["type"] == "volume" and header["dims"] == [2, 2, 2]


def test_sinogram_round_trip(tmp_path, rng):
    g = make_geometry("desk", det_rows=3, det_cols=5, n_views=4, step_deg=90.0)
    s = Sinogram(g, rng.random((4, 3, 5)).astype(np.float32).astype(float))
    write_sinogram(s, tmp_path / "s.sino")
    back = read_sinogram(tmp_path / "s.sino")
    assert back.geom == g and back.data.tobytes() == s.data.tobytes()


def test_truncated_payload(tmp_path, rng):
    write_volume(random_volume(rng), tmp_path / "a.vol")
    raw = (tmp_path / "a.vol").read_bytes()
    (tmp_path / "a.vol").write_bytes(raw[:-4])
    with pytest.raises(StoreError, match="should be 16384 bytes.*found 16380"):
        read_volume(tmp_path / "a.vol")


def test_bad_header_and_units(tmp_path, rng):
    (tmp_path / "x.vol").write_bytes(b"{not json\n\x00\x00")
    with pytest.raises(StoreError, match="malformed JSON header"):
        read_volume(tmp_path / "x.vol")
    write_volume(random_volume(rng), tmp_path / "a.vol")
    raw = (tmp_path / "a.vol").read_bytes().replace(b'"units":"hu"', b'"units":"xx"')
    (tmp_path / "a.vol").write_bytes(raw)
    with pytest.raises(StoreError, match="unknown units"):
        read_volume(tmp_path / "a.vol")
    write_volume(random_volume(rng), tmp_path / "b.vol")
    with pytest.raises(StoreError, match="not 'sinogram'"):
        read_sinogram(tmp_path / "b.vol")


def test_no_temporary_files_left(tmp_path, rng):
    write_volume(random_volume(rng), tmp_path / "a.vol")
    assert [p.name for p in tmp_path.iterdir()] == ["a.vol"]


def test_window_mapping():
    g = window_to_gray(np.array([40.0, -160.0, -500.0, 240.0, 900.0]), 40.0, 400.0)
    assert abs(int(g[0]) - 128) <= 1
    assert g[1] == 0 and g[2] == 0 and g[3] == 255 and g[4] == 255


@pytest.mark.parametrize("axis", ["axial", "coronal", "sagittal"])
def test_png_export(tmp_path, rng, axis):
    vol = random_volume(rng, n=64)
    export_slice_png(vol, axis, 10, (40.0, 400.0), tmp_path / "s.png")
    img = Image.open(tmp_path / "s.png")
    assert img.mode == "L" and img.size == (64, 64)


def test_png_export_index_checked(tmp_path, rng):
    with pytest.raises(IndexError):
        export_slice_png(random_volume(rng), "axial", 16, (0.0, 100.0), tmp_path / "s.png")
