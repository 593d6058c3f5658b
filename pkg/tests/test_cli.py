import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from lagicd.cli import main
from lagicd.store import read_sinogram, read_volume

SMALL_GEOM = {"preset": "desk", "det_rows": 24, "det_cols": 32, "det_spacing_u_mm": 24.96,
              "det_spacing_v_mm": 24.96, "n_views": 36, "step_deg": 10.0}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "geom.json").write_text(json.dumps(SMALL_GEOM))
    assert main(["phantom", "--out-dir", str(d), "--geometry", str(d / "geom.json"),
                 "--grid-n", "32"]) == 0
    assert main(["arc", "--in", str(d / "full.sino"), "--start", "135", "--end", "225",
                 "--out", str(d / "limited.sino")]) == 0
    (d / "c.json").write_text(json.dumps({
        "limited": "limited.sino", "truth_volume": "truth.vol", "truth_sinogram": "full.sino",
        "proj_denoiser": {"kind": "oracle", "reference": "truth_sinogram"},
        "img_denoiser": {"kind": "oracle", "reference": "truth_volume"},
        "n_steps": 50,
    }))
    return d


def test_phantom_outputs(workspace):
    vol = read_volume(workspace / "truth.vol")
    assert vol.grid.shape == (32, 32, 32) and vol.units == "mu_per_mm"
    assert read_sinogram(workspace / "full.sino").geom.n_views == 36
    assert (workspace / "phantom.json").exists()


def test_arc_on_360_view_file(tmp_path, capsys):
    g = dict(SMALL_GEOM, n_views=360, step_deg=1.0, det_rows=2, det_cols=3)
    (tmp_path / "g.json").write_text(json.dumps(g))
    spec = tmp_path / "p"
    code, _ = run(["phantom", "--out-dir", spec, "--geometry", tmp_path / "g.json", "--grid-n", "8"], capsys)
    assert code == 0
    code, out = run(["arc", "--in", spec / "full.sino", "--start", 135, "--end", 225,
                     "--out", tmp_path / "a.sino"], capsys)
    assert code == 0 and out["views"] == 90
    assert read_sinogram(tmp_path / "a.sino").geom.angles_deg[0] == 135.0


def test_metrics_identical(workspace, capsys):
    code, out = run(["metrics", "--recon", workspace / "truth.vol", "--truth", workspace / "truth.vol"], capsys)
    assert code == 0
    assert out["mae_hu"] == 0.0 and out["ssim"] == 1.0 and out["psnr_db"] == "inf"
    assert set(out) == {"mae_hu", "ssim", "psnr_db", "mask_voxels", "metadata"}


def test_project_fdk_export(workspace, tmp_path, capsys):
    code, out = run(["project", "--volume", workspace / "truth.vol", "--geometry",
                     workspace / "geom.json", "--out", tmp_path / "p.sino"], capsys)
    assert code == 0 and out["views"] == 36
    code, out = run(["fdk", "--in", workspace / "full.sino", "--like", workspace / "truth.vol",
                     "--units", "hu", "--out", tmp_path / "r.vol"], capsys)
    assert code == 0 and read_volume(tmp_path / "r.vol").units == "hu"
    code, out = run(["export-slice", "--in", tmp_path / "r.vol", "--axis", "coronal",
                     "--index", 16, "--out", tmp_path / "r.png"], capsys)
    assert code == 0 and (tmp_path / "r.png").exists()


def test_adjoint_test_command(capsys):
    code, out = run(["adjoint-test", "--seed", 1, "--view-stride", 20, "--grid-n", 16], capsys)
    assert code == 0 and out["passed"] and out["views"] == 9


def test_pipeline_twice_byte_identical(workspace, capsys):
    inputs = {p: digest(workspace / p) for p in ("limited.sino", "full.sino", "truth.vol", "c.json")}
    outs = []
    for name in ("o1", "o2"):
        code, out = run(["pipeline", "--config", workspace / "c.json", "--seed", 7,
                         "--out-dir", workspace / name], capsys)
        assert code == 0
        assert out["losses"]["total"] == out["losses"]["l_ct_rec"] * 0.5 + out["losses"]["l_ct_cycle"] * 0.5
        outs.append(workspace / name)
    for f in ("sino_completed.sino", "vol_intermediate.vol", "vol_final.vol", "result.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    assert inputs == {p: digest(workspace / p) for p in inputs}


def test_uncertainty_command(workspace, tmp_path, capsys):
    code, out = run(["uncertainty", "--config", workspace / "c.json", "--seed", 3, "--runs", 2,
                     "--out", tmp_path / "u.vol"], capsys)
    assert code == 0 and out["seeds"] == [3, 4] and out["max_std"] < 1e-6


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["pipeline", "--config", "c.json", "--out-dir", "o"],
    ["uncertainty", "--config", "c.json", "--out", "u.vol"],
    ["adjoint-test"],
    ["arc", "--in", "x", "--start", "abc", "--end", "2", "--out", "y"],
    ["export-slice", "--in", "x", "--axis", "oblique", "--index", "0", "--out", "y"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().out == ""


def test_runtime_errors_exit_2(workspace, tmp_path, capsys):
    assert main(["metrics", "--recon", str(tmp_path / "nope.vol"), "--truth", str(workspace / "truth.vol")]) == 2
    assert main(["arc", "--in", str(workspace / "full.sino"), "--start", "200", "--end", "100",
                 "--out", str(tmp_path / "x.sino")]) == 2
    assert main(["export-slice", "--in", str(workspace / "truth.vol"), "--index", "99",
                 "--out", str(tmp_path / "x.png")]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["pipeline", "--config", str(tmp_path / "bad.json"), "--seed", "1",
                 "--out-dir", str(tmp_path / "o")]) == 2
    captured = capsys.readouterr()
    assert captured.out == "" and "error" in captured.err


def test_module_entry_point_exit_codes(workspace):
    ok = subprocess.run([sys.executable, "-m", "lagicd", "metrics", "--recon", str(workspace / "truth.vol"),
                         "--truth", str(workspace / "truth.vol")], capture_output=True, text=True)
    assert ok.returncode == 0 and json.loads(ok.stdout)["ssim"] == 1.0
    assert "TBB" not in ok.stderr
    usage = subprocess.run([sys.executable, "-m", "lagicd", "pipeline"], capture_output=True, text=True)
    assert usage.returncode == 1 and usage.stdout == ""
    err = subprocess.run([sys.executable, "-m", "lagicd", "metrics", "--recon", "missing", "--truth", "missing"],
                         capture_output=True, text=True)
    assert err.returncode == 2
