"""JSON pipeline configuration mirroring :class:`~lagicd.gicd.GicdConfig`.

Example::

    {
      "limited": "limited.sino",
      "truth_volume": "truth.vol",
      "truth_sinogram": "full.sino",
      "full_geometry": "desk",
      "grid": {"n": 64, "diameter_mm": 495},
      "T": 1000, "n_steps": 50, "eta": 0.0,
      "proj_denoiser": {"kind": "oracle", "reference": "truth_sinogram"},
      "img_denoiser": {"kind": "oracle", "reference": "truth_volume"},
      "gamma1": 0.05, "gamma2": 0.5, "gamma3": 0.5,
      "arc": [135, 225],
      "filter": {"cutoff": 1.0},
      "vol_range_hu": [-1000, 2000]
    }

Paths are relative to the config file. ``proj_range`` defaults to
``[0, max]`` of the truth sinogram, or of the limited one without truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import Sinogram, Volume
from .denoisers import make_denoiser
from .diffusion import cosine_schedule
from .fdk import RampFilterSpec
from .geometry import ConeBeamGeometry, VolumeGrid, desk_grid, make_geometry
from .gicd import (DEFAULT_VOL_RANGE_HU, DEFAULT_ARC, DEFAULT_GAMMAS, GicdConfig,
                   normalize_sinogram, normalize_volume, projection_range)
from .store import read_sinogram, read_volume


class ConfigError(ValueError):
    pass


@dataclass
class PipelineInputs:
    cfg: GicdConfig
    limited: Sinogram
    truth_volume: Volume | None = None
    truth_sino: Sinogram | None = None


def parse_geometry(value) -> ConeBeamGeometry:
    if isinstance(value, str):
        return make_geometry(value)
    if isinstance(value, dict):
        if "preset" in value:
            extra = {k: v for k, v in value.items() if k != "preset"}
            return make_geometry(value["preset"], **extra)
        return ConeBeamGeometry.from_dict(value)
    raise ConfigError(f"cannot interpret geometry {value!r}")


def parse_grid(value) -> VolumeGrid:
    if isinstance(value, int):
        return desk_grid(value)
    if isinstance(value, dict):
        if "n" in value:
            return desk_grid(int(value["n"]), float(value.get("diameter_mm", 495.0)))
        return VolumeGrid.from_dict(value)
    raise ConfigError(f"cannot interpret grid {value!r}")


def load_pipeline_config(path, seed: int) -> PipelineInputs:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    base = path.parent

    def p(key):
        return base / raw[key]

    if "limited" not in raw:
        raise ConfigError(f"{path}: 'limited' sinogram path is required")
    limited = read_sinogram(p("limited"))
    truth_volume = read_volume(p("truth_volume")) if "truth_volume" in raw else None
    truth_sino = read_sinogram(p("truth_sinogram")) if "truth_sinogram" in raw else None

    if "full_geometry" in raw:
        full_geom = parse_geometry(raw["full_geometry"])
    elif truth_sino is not None:
        full_geom = truth_sino.geom
    else:
        raise ConfigError(f"{path}: need 'full_geometry' or 'truth_sinogram'")
    if "grid" in raw:
        grid = parse_grid(raw["grid"])
    elif truth_volume is not None:
        grid = truth_volume.grid
    else:
        raise ConfigError(f"{path}: need 'grid' or 'truth_volume'")

    if "proj_range" in raw:
        proj_range = tuple(raw["proj_range"])
    elif limited.units == "normalized":
        proj_range = limited.norm_range
    else:
        proj_range = projection_range(truth_sino if truth_sino is not None else limited)
    vol_range = tuple(raw.get("vol_range_hu", DEFAULT_VOL_RANGE_HU))

    refs = {}
    if truth_sino is not None:
        ts = truth_sino if truth_sino.units == "normalized" else normalize_sinogram(truth_sino, proj_range)
        refs["truth_sinogram"] = ts.data
    if truth_volume is not None:
        refs["truth_volume"] = normalize_volume(truth_volume, vol_range).data

    try:
        cfg = GicdConfig(
            full_geom=full_geom,
            grid=grid,
            proj_denoiser=make_denoiser(raw["proj_denoiser"], refs, base),
            img_denoiser=make_denoiser(raw["img_denoiser"], refs, base),
            proj_range=proj_range,
            sched=cosine_schedule(int(raw.get("T", 1000))),
            n_steps=int(raw.get("n_steps", 50)),
            eta=float(raw.get("eta", 0.0)),
            gamma1=float(raw.get("gamma1", DEFAULT_GAMMAS[0])),
            gamma2=float(raw.get("gamma2", DEFAULT_GAMMAS[1])),
            gamma3=float(raw.get("gamma3", DEFAULT_GAMMAS[2])),
            arc=tuple(raw.get("arc", DEFAULT_ARC)),
            filter=RampFilterSpec(**raw.get("filter", {})),
            vol_range_hu=vol_range,
            seed=int(seed),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing field {exc}") from None
    return PipelineInputs(cfg, limited, truth_volume, truth_sino)
