"""Command-line entry point. Results go to stdout as JSON, logs to stderr.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .data import select_arc
from .fdk import RampFilterSpec, fdk_reconstruct
from .geometry import VolumeGrid, desk_grid, make_geometry
from .metrics import evaluate
from .phantom import (PhantomSpec, analytic_project, make_pelvis_like_phantom,
                      make_sphere_phantom, rasterize)
from .projector import dot_product_test, forward_project

log = logging.getLogger("lagicd")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _geometry_arg(value: str):
    from .config import parse_geometry

    if value.endswith(".json") or Path(value).is_file():
        return parse_geometry(json.loads(Path(value).read_text()))
    return make_geometry(value)


def _grid_from(args) -> VolumeGrid:
    if getattr(args, "like", None):
        from .store import read_volume
        return read_volume(args.like).grid
    return desk_grid(args.grid_n, args.diameter_mm)


def cmd_phantom(args):
    from .store import write_sinogram, write_volume

    if args.spec:
        spec = PhantomSpec.from_json(Path(args.spec).read_text())
    elif args.kind == "pelvis":
        spec = make_pelvis_like_phantom()
    else:
        spec = make_sphere_phantom(args.radius_mm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geom = _geometry_arg(args.geometry)
    grid = desk_grid(args.grid_n, args.diameter_mm)
    (out / "phantom.json").write_text(spec.to_json())
    write_volume(rasterize(spec, grid, args.supersample), out / "truth.vol")
    sino = analytic_project(spec, geom)
    write_sinogram(sino, out / "full.sino")
    return {"phantom": str(out / "phantom.json"), "volume": str(out / "truth.vol"),
            "sinogram": str(out / "full.sino"), "max_line_integral": float(sino.data.max())}


def cmd_project(args):
    from .store import read_volume, write_sinogram

    vol = read_volume(args.volume).to_mu()
    sino = forward_project(vol, _geometry_arg(args.geometry), args.step_mm)
    write_sinogram(sino, args.out)
    return {"sinogram": args.out, "views": sino.geom.n_views}


def cmd_arc(args):
    from .store import read_sinogram, write_sinogram

    sino = select_arc(read_sinogram(args.input), args.start, args.end)
    write_sinogram(sino, args.out)
    return {"sinogram": args.out, "views": sino.geom.n_views,
            "first_deg": sino.geom.angles_deg[0], "last_deg": sino.geom.angles_deg[-1]}


def cmd_fdk(args):
    from .gicd import denormalize_sinogram
    from .store import read_sinogram, write_volume

    sino = read_sinogram(args.input)
    if sino.units == "normalized":
        sino = denormalize_sinogram(sino)
    vol = fdk_reconstruct(sino, _grid_from(args), RampFilterSpec(args.cutoff))
    if args.units == "hu":
        vol = vol.to_hu()
    write_volume(vol, args.out)
    return {"volume": args.out, "units": vol.units}


def _write_result(result, out: Path) -> dict:
    from .store import write_sinogram, write_volume

    out.mkdir(parents=True, exist_ok=True)
    write_sinogram(result.sino_completed, out / "sino_completed.sino")
    write_volume(result.vol_intermediate, out / "vol_intermediate.vol")
    write_volume(result.vol_final, out / "vol_final.vol")
    summary = {"losses": result.losses.to_dict(),
               "metrics": None if result.metrics is None else result.metrics.to_dict(),
               "outputs": {"sino_completed": "sino_completed.sino",
                           "vol_intermediate": "vol_intermediate.vol",
                           "vol_final": "vol_final.vol"}}
    (out / "result.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return dict(summary, out_dir=str(out))


def cmd_pipeline(args):
    from .config import load_pipeline_config
    from .gicd import run_pipeline

    inp = load_pipeline_config(args.config, args.seed)
    result = run_pipeline(inp.limited, inp.cfg, inp.truth_volume, inp.truth_sino)
    return _write_result(result, Path(args.out_dir))


def cmd_uncertainty(args):
    from .config import load_pipeline_config
    from .gicd import uncertainty_map
    from .store import write_volume

    inp = load_pipeline_config(args.config, args.seed)
    seeds = [args.seed + i for i in range(args.runs)]
    std = uncertainty_map(inp.limited, inp.cfg, args.runs, seeds)
    write_volume(std, args.out)
    return {"volume": args.out, "seeds": seeds, "max_std": float(std.data.max()),
            "mean_std": float(std.data.mean())}


def cmd_metrics(args):
    from .store import read_volume

    report = evaluate(read_volume(args.recon), read_volume(args.truth),
                      args.threshold, args.masked)
    return report.to_dict()


def cmd_export_slice(args):
    from .store import export_slice_png, read_volume

    export_slice_png(read_volume(args.input), args.axis, args.index,
                     (args.center, args.width), args.out)
    return {"png": args.out}


def cmd_adjoint_test(args):
    geom = _geometry_arg(args.geometry)
    if args.view_stride > 1:
        geom = geom.with_angles(geom.angles_deg[::args.view_stride])
    grid = desk_grid(args.grid_n, args.diameter_mm)
    err = dot_product_test(geom, grid, args.seed)
    return {"relative_discrepancy": err, "views": geom.n_views, "passed": err < 1e-4}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lagicd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def grid_opts(sp):
        sp.add_argument("--grid-n", type=int, default=64)
        sp.add_argument("--diameter-mm", type=float, default=495.0)

    sp = sub.add_parser("phantom", help="phantom spec, rasterized volume and analytic sinogram")
    sp.add_argument("--kind", choices=("pelvis", "sphere"), default="pelvis")
    sp.add_argument("--spec", help="phantom JSON instead of a built-in kind")
    sp.add_argument("--radius-mm", type=float, default=100.0)
    sp.add_argument("--geometry", default="desk", help="preset name or geometry JSON file")
    sp.add_argument("--supersample", type=int, default=2)
    sp.add_argument("--out-dir", required=True)
    grid_opts(sp)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("project", help="numerical forward projection of a volume")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--geometry", default="desk")
    sp.add_argument("--step-mm", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_project)

    sp = sub.add_parser("arc", help="keep views in the half-open arc [start, end)")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--start", type=float, required=True)
    sp.add_argument("--end", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_arc)

    sp = sub.add_parser("fdk", help="FDK reconstruction")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--like", help="take the grid from this volume file")
    sp.add_argument("--cutoff", type=float, default=1.0)
    sp.add_argument("--units", choices=("mu_per_mm", "hu"), default="mu_per_mm")
    grid_opts(sp)
    sp.set_defaults(func=cmd_fdk)

    sp = sub.add_parser("pipeline", help="run the two-stage pipeline from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("uncertainty", help="voxelwise std over repeated pipeline runs")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, required=True, help="first seed; runs use seed..seed+runs-1")
    sp.add_argument("--runs", type=int, default=3)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_uncertainty)

    sp = sub.add_parser("metrics", help="MAE (HU), SSIM and PSNR of a reconstruction")
    sp.add_argument("--recon", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--threshold", type=float, default=-500.0)
    sp.add_argument("--masked", action="store_true", help="restrict SSIM and PSNR to the body")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("export-slice", help="window/level PNG of one slice")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--axis", choices=("axial", "coronal", "sagittal"), default="axial")
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--center", type=float, default=40.0)
    sp.add_argument("--width", type=float, default=400.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_slice)

    sp = sub.add_parser("adjoint-test", help="dot-product test of the projector pair")
    sp.add_argument("--geometry", default="desk")
    sp.add_argument("--view-stride", type=int, default=1)
    sp.add_argument("--seed", type=int, required=True)
    grid_opts(sp)
    sp.set_defaults(func=cmd_adjoint_test, grid_n=32)
    return p


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"lagicd: usage error: {exc}\n")
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    # numba reports an unusable TBB layer once per process; it falls back on its own
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # runtime failures map to exit status 2
        log.debug("command failed", exc_info=True)
        sys.stderr.write(f"lagicd: error: {exc}\n")
        return EXIT_RUNTIME
    _emit(_jsonable(result))
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())
