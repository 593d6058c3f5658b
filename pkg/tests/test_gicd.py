from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from lagicd import gicd
from lagicd.data import Sinogram, Volume, select_arc
from lagicd.denoisers import GaussianPosteriorDenoiser, OracleDenoiser
from lagicd.diffusion import DenoiserError
from lagicd.fdk import fdk_reconstruct
from lagicd.gicd import (GicdConfig, PipelineError, complete_projections, ct_cycle_loss,
                         ct_rec_loss, denormalize, fdk_baseline, gtm_reconstruct, normalize,
                         normalize_sinogram, normalize_volume, projection_range, refine_volume,
                         run_pipeline, total_loss, uncertainty_map)
from lagicd.metrics import ssim


@pytest.fixture(scope="module")
def setup(request):
    desk = request.getfixturevalue("desk")
    grid = request.getfixturevalue("grid64")
    sino = request.getfixturevalue("pelvis_sino")
    truth = request.getfixturevalue("pelvis_truth")
    prange = projection_range(sino)
    full_n = normalize_sinogram(sino, prange)
    truth_n = normalize_volume(truth)
    cfg = GicdConfig(full_geom=desk, grid=grid, proj_denoiser=OracleDenoiser(full_n.data),
                     img_denoiser=OracleDenoiser(truth_n.data), proj_range=prange, seed=3)
    limited = select_arc(sino, 135, 225)
    return SimpleNamespace(cfg=cfg, sino=sino, truth=truth, full_n=full_n, truth_n=truth_n,
                           limited=limited, limited_n=normalize_sinogram(limited, prange))


@pytest.fixture(scope="module")
def oracle_result(setup):
    return run_pipeline(setup.limited, setup.cfg, setup.truth, setup.sino)


def test_normalize_examples(rng):
    assert normalize(5.0, (0.0, 10.0)) == 0.0
    assert normalize(500.0, (-1000.0, 2000.0)) == 0.0
    assert normalize(-1000.0, (-1000.0, 2000.0)) == -1.0
    x = rng.uniform(-3000, 5000, 100)
    np.testing.assert_allclose(denormalize(normalize(x, (-1000, 2000)), (-1000, 2000)), x, rtol=1e-7)
    with pytest.raises(ValueError):
        normalize(1.0, (2.0, 2.0))


def test_config_validation(setup):
    with pytest.raises(ValueError):
        replace(setup.cfg, gamma2=-0.1)
    with pytest.raises(ValueError):
        replace(setup.cfg, arc=(300.0, 400.0))


def test_complete_projections_oracle(setup):
    out = complete_projections(setup.limited_n, setup.cfg.full_geom, setup.cfg)
    assert out.data.shape[0] == setup.cfg.full_geom.n_views
    np.testing.assert_allclose(out.data, setup.full_n.data, atol=1e-6)
    idx = [setup.cfg.full_geom.angles_deg.index(a) for a in setup.limited.geom.angles_deg]
    assert out.data[idx].tobytes() == setup.limited_n.data.tobytes()


def test_measured_views_survive_a_wrong_denoiser(setup):
    cfg = replace(setup.cfg, proj_denoiser=GaussianPosteriorDenoiser(0.0, 1.0), n_steps=3)
    out = complete_projections(setup.limited_n, cfg.full_geom, cfg)
    idx = [cfg.full_geom.angles_deg.index(a) for a in setup.limited.geom.angles_deg]
    assert out.data[idx].tobytes() == setup.limited_n.data.tobytes()


def test_gtm_is_fdk_composition(setup):
    direct = fdk_reconstruct(setup.sino, setup.cfg.grid)
    via = gtm_reconstruct(setup.full_n, setup.cfg)
    np.testing.assert_allclose(via.data, normalize_volume(direct).data, atol=1e-9)


def test_gtm_of_zero_sinogram(setup):
    zero = setup.sino.with_data(np.zeros_like(setup.sino.data))
    vol = gtm_reconstruct(normalize_sinogram(zero, setup.cfg.proj_range), setup.cfg)
    np.testing.assert_allclose(vol.data, normalize(-1000.0, setup.cfg.vol_range_hu), atol=1e-9)


def test_gtm_full_arc_quality(setup):
    vol = gtm_reconstruct(setup.full_n, setup.cfg)
    assert ssim(vol.data, setup.truth_n.data) > 0.9


def test_refine_volume_oracle(setup):
    inter = gtm_reconstruct(setup.full_n, setup.cfg)
    a = refine_volume(inter, setup.cfg)
    b = refine_volume(inter, setup.cfg)
    assert a.data.shape == setup.cfg.grid.shape
    np.testing.assert_allclose(a.data, setup.truth_n.data, atol=1e-6)
    assert a.data.tobytes() == b.data.tobytes()


def test_mae_losses(rng):
    a = rng.standard_normal((4, 5, 6))
    b = rng.standard_normal((4, 5, 6))
    assert ct_rec_loss(a, a) == 0.0 and ct_cycle_loss(a, a) == 0.0
    assert ct_rec_loss(a, a + 0.2) == pytest.approx(0.2)
    assert ct_cycle_loss(a + 0.1, a) == pytest.approx(0.1)
    brute = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(ct_rec_loss(a, b) - brute) < 1e-9
    assert abs(ct_cycle_loss(a, b) - brute) < 1e-9
    with pytest.raises(ValueError):
        ct_rec_loss(a, b[:-1])


def test_total_loss(setup):
    assert total_loss(1.0, 1.0, 1.0, 1.0).total == 2.05
    assert total_loss(0.0, 0.0, 0.0, 0.0).total == 0.0
    zero = replace(setup.cfg, gamma1=0.0, gamma2=0.0, gamma3=0.0)
    assert total_loss(0.7, 3.0, 4.0, 5.0, zero).total == 0.7
    r = total_loss(0.3, None, 0.2, 0.1, setup.cfg)
    assert r.total == 0.3 + 0.5 * 0.2 + 0.5 * 0.1 and r.l_sigma is None


def test_cycle_closure(setup, oracle_result):
    res = oracle_result
    assert np.mean(np.abs(res.vol_final.data - setup.truth_n.data)) < 1e-3
    assert res.losses.l_ct_cycle < 1e-3
    assert res.losses.l_mu is None and res.losses.l_sigma is None
    lr = res.losses
    assert lr.total == 0.0 + 0.5 * lr.l_ct_rec + 0.5 * lr.l_ct_cycle
    assert res.metrics is not None and res.metrics.ssim > 0.999
    for a in (res.sino_completed, res.vol_intermediate, res.vol_final):
        assert a.units == "normalized" and np.all(np.isfinite(a.data))


def test_pipeline_is_deterministic(setup, oracle_result):
    again = run_pipeline(setup.limited, setup.cfg, setup.truth, setup.sino)
    assert again.vol_final.data.tobytes() == oracle_result.vol_final.data.tobytes()
    assert again.sino_completed.data.tobytes() == oracle_result.sino_completed.data.tobytes()
    assert again.losses == oracle_result.losses


def test_fdk_bypass_is_worse(setup, oracle_result):
    base = fdk_baseline(setup.limited, setup.cfg)
    assert ssim(base.data, setup.truth_n.data) < ssim(oracle_result.vol_final.data, setup.truth_n.data)


def test_stage_tagged_errors(setup):
    def broken(x, t, ab, c):
        raise DenoiserError("boom")

    with pytest.raises(PipelineError, match=r"\[image\]") as info:
        run_pipeline(setup.limited, replace(setup.cfg, img_denoiser=broken))
    assert info.value.stage == "image"
    with pytest.raises(PipelineError, match=r"\[projection\]"):
        run_pipeline(setup.limited, replace(setup.cfg, proj_denoiser=broken))


def test_uncertainty_oracle_is_flat(setup):
    std = uncertainty_map(setup.limited, setup.cfg, 2, [1, 2])
    assert std.data.max() < 1e-6


def test_uncertainty_stochastic(setup):
    cfg = replace(setup.cfg, img_denoiser=GaussianPosteriorDenoiser(0.0, 0.1), eta=1.0, n_steps=5)
    std = uncertainty_map(setup.limited, cfg, 3, [4, 5, 6])
    assert np.all(np.isfinite(std.data)) and std.data.min() >= 0 and std.data.max() > 0


def test_uncertainty_population_convention(setup, monkeypatch):
    def fake(limited, cfg, *args):
        return SimpleNamespace(vol_final=SimpleNamespace(data=np.full(cfg.grid.shape, 0.06 * (cfg.seed == 2))))

    monkeypatch.setattr(gicd, "run_pipeline", fake)
    std = uncertainty_map(setup.limited, setup.cfg, 2, [1, 2])
    np.testing.assert_allclose(std.data, 0.03, atol=1e-15)


def test_uncertainty_argument_checks(setup):
    with pytest.raises(ValueError):
        uncertainty_map(setup.limited, setup.cfg, 2, [1, 1])
    with pytest.raises(ValueError):
        uncertainty_map(setup.limited, setup.cfg, 1, [1])
    with pytest.raises(ValueError):
        uncertainty_map(setup.limited, setup.cfg, 3, [1, 2])
