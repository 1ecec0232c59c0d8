import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pnec.energy import gram_matrix, nec_energy
from pnec.metrics import rotation_error, translation_error
from pnec.optimizer import SolverConfig, nec_estimate, pnec_estimate
from pnec.simulation import (Cell, NoiseSpec, SceneConfig, cell_params, covariance_from_parameters,
                             covariance_sqrt, generate_instance, initial_rotation, make_rng,
                             offset_covariances, run_experiment, sample_covariance,
                             sample_noise_parameters, trial_seed)

from conftest import seeds


def angles(a, b):
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))


def test_iso_homo_is_half_identity():
    cov = sample_covariance(NoiseSpec("iso-homo"), make_rng(0))
    assert np.array_equal(cov, 0.5 * np.eye(2))


def test_rank_one_extreme():
    assert np.allclose(covariance_from_parameters(1.0, 1.0, 0.0), np.diag([1.0, 0.0]))


@given(seeds)
def test_aniso_inhomo_spectrum(seed):
    rng = make_rng(seed)
    spec = NoiseSpec("aniso-inhomo")
    s, beta, alpha = sample_noise_parameters(spec, rng, size=5)
    covs = covariance_from_parameters(s, beta, alpha)
    for k in range(5):
        vals = np.linalg.eigvalsh(covs[k])
        expected = np.sort([s[k] * beta[k], s[k] * (1 - beta[k])])
        assert np.allclose(vals, expected, atol=1e-12)
        assert np.isclose(np.trace(covs[k]), s[k])


@given(st.floats(0.1, 2), st.floats(0, 1), st.floats(0, np.pi))
def test_covariance_sqrt(s, beta, alpha):
    L = covariance_sqrt(s, beta, alpha)
    assert np.allclose(L @ L.T, covariance_from_parameters(s, beta, alpha), atol=1e-12)


def test_parameter_ranges():
    rng = make_rng(1)
    for kind in ("iso-inhomo", "aniso-homo", "aniso-inhomo"):
        s, beta, alpha = sample_noise_parameters(NoiseSpec(kind), rng, size=1000)
        assert np.all((0.5 <= s) & (s <= 1.5))
        assert np.all((0.5 <= beta) & (beta <= 1.0))
        assert np.all((0 <= alpha) & (alpha <= np.pi))


def test_aniso_homo_shares_beta():
    s, beta, _ = sample_noise_parameters(NoiseSpec("aniso-homo"), make_rng(2), size=50)
    assert np.all(s == 1) and np.all(beta == beta[0])


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(level=0)
    with pytest.raises(ValueError):
        NoiseSpec("gaussian")
    with pytest.raises(ValueError):
        SceneConfig(n_points=4)


def test_generate_is_deterministic():
    a = generate_instance(seed=42)
    b = generate_instance(seed=42)
    assert np.array_equal(a.correspondences.f_target, b.correspondences.f_target)
    assert np.array_equal(a.correspondences.cov_target, b.correspondences.cov_target)
    assert np.array_equal(a.truth.rotation, b.truth.rotation)
    c = generate_instance(seed=43)
    assert not np.array_equal(a.correspondences.f_target, c.correspondences.f_target)


@pytest.mark.parametrize("camera", ["omni", "pinhole"])
def test_small_noise_consistent_with_truth(camera):
    inst = generate_instance(spec=NoiseSpec(level=1e-9), camera=camera, seed=3)
    cs = inst.correspondences
    assert nec_energy(cs.f_host, cs.f_target, inst.truth.rotation, inst.truth.translation) <= 1e-18


def test_zero_translation_limit():
    scene = SceneConfig(translation_enabled=False)
    inst = generate_instance(scene, NoiseSpec(level=1e-9), seed=4)
    M = gram_matrix(inst.correspondences.f_host, inst.correspondences.f_target, inst.truth.rotation)
    assert np.linalg.eigvalsh(M)[0] <= 1e-18


def _pinhole_errors(level, n=1000, scene=None):
    scene = scene or SceneConfig()
    spec = NoiseSpec("iso-homo", level=level)
    errs, cos = [], []
    for seed in range(n):
        inst = generate_instance(scene, spec, "pinhole", seed)
        clean = generate_instance(scene, NoiseSpec("iso-homo", level=1e-12), "pinhole", seed)
        errs.append(angles(inst.correspondences.f_target, clean.correspondences.f_target))
        cos.append(clean.correspondences.f_target[:, 2])
    return np.concatenate(errs), np.concatenate(cos)


def test_pinhole_rms_perturbation_box_scene():
    """iso-homo has trace 1, so the pixel offset has RMS 2 * level."""
    errs, _ = _pinhole_errors(1.0, scene=SceneConfig(pinhole_cone_deg=None))
    rms = np.sqrt(np.mean(errs**2))
    assert abs(rms - 2.0 / 800) / (2.0 / 800) < 0.15


def test_pinhole_rms_perturbation_matches_projection():
    """A pixel at angle theta off axis subtends cos^2/f radially and cos/f
    tangentially, so each isotropic offset has mean squared angle
    (2 level)^2 / 2 (cos^4 + cos^2) / f^2."""
    errs, c = _pinhole_errors(1.0)
    expected = np.sqrt(np.mean(2.0 * (c**4 + c**2))) / 800
    assert abs(np.sqrt(np.mean(errs**2)) - expected) / expected < 0.05


def test_doubling_level_doubles_rms():
    a, _ = _pinhole_errors(2.0, 300)
    b, _ = _pinhole_errors(1.0, 300)
    assert np.sqrt(np.mean(a**2)) / np.sqrt(np.mean(b**2)) == pytest.approx(2.0, rel=1e-4)


def test_omni_rms_perturbation():
    spec = NoiseSpec("iso-homo", level=1.0)
    errs = []
    for seed in range(1000):
        a = generate_instance(spec=spec, seed=seed)
        b = generate_instance(spec=NoiseSpec("iso-homo", level=1e-12), seed=seed)
        errs.append(angles(a.correspondences.f_target, b.correspondences.f_target))
    rms = np.sqrt(np.mean(np.concatenate(errs) ** 2))
    assert abs(rms - 2.0 / 800) / (2.0 / 800) < 0.05


def test_host_bearings_are_exact():
    inst = generate_instance(seed=5)
    X_dirs = inst.correspondences.f_host
    assert np.allclose(np.linalg.norm(X_dirs, axis=1), 1)
    clean = generate_instance(spec=NoiseSpec(level=1e-12), seed=5)
    assert np.array_equal(X_dirs, clean.correspondences.f_host)


def test_pinhole_points_in_front():
    inst = generate_instance(camera="pinhole", seed=6)
    assert np.all(inst.correspondences.f_host[:, 2] > 0)
    assert np.all(inst.correspondences.f_target[:, 2] > 0)


def test_offset_zero_unchanged():
    inst = generate_instance(seed=7)
    out = offset_covariances(inst, 0.0, make_rng(0))
    assert np.array_equal(out.correspondences.cov_target, inst.correspondences.cov_target)


@pytest.mark.parametrize("camera", ["omni", "pinhole"])
def test_offset_keeps_noise_realization(camera):
    inst = generate_instance(camera=camera, seed=8)
    out = offset_covariances(inst, 0.5, make_rng(1))
    assert np.array_equal(out.correspondences.f_target, inst.correspondences.f_target)
    assert np.array_equal(out.observations, inst.observations)
    assert not np.allclose(out.correspondences.cov_target, inst.correspondences.cov_target)


@given(seeds)
def test_offset_clamps_parameters(seed):
    inst = generate_instance(seed=seed % 1000)
    out = offset_covariances(inst, 1.0, make_rng(seed))
    s, beta, alpha = out.noise_params.T
    assert np.all((0.5 <= beta) & (beta <= 1.0))
    assert np.all((0.5 <= s) & (s <= 1.5))
    assert np.all((0 <= alpha) & (alpha <= np.pi))


def test_offset_rejects_bad_fraction():
    with pytest.raises(ValueError):
        offset_covariances(generate_instance(seed=0), 1.5, make_rng(0))


def test_trial_seeds_independent_of_offset():
    a, b = Cell(), Cell(offset_fraction=0.25)
    assert trial_seed(0, a, 3) == trial_seed(0, b, 3)
    assert trial_seed(0, a, 3) != trial_seed(1, a, 3)
    assert trial_seed(0, a, 3) != trial_seed(0, a, 4)


@pytest.mark.parametrize("estimator", ["nec", "pnec"])
def test_single_trial_matches_direct_call(estimator):
    cell = Cell(camera="pinhole")
    rows = run_experiment([cell], trials=1, estimators=(estimator,))
    inst = generate_instance(cell.scene, cell.noise, cell.camera, trial_seed(0, cell, 0),
                             cell_params(0, cell))
    R0 = initial_rotation(cell, inst.truth.rotation, 0, 0)
    if estimator == "pnec":
        report = pnec_estimate(inst.correspondences, R_init=R0)
    else:
        report = nec_estimate(inst.correspondences, R_init=R0)
    assert rows[0]["mean_e_rot"] == pytest.approx(
        float(rotation_error(inst.truth.rotation, report.pose.rotation)), rel=1e-9)
    assert rows[0]["mean_e_t"] == pytest.approx(
        float(translation_error(inst.truth.translation, report.pose.translation)), rel=1e-9)


def test_parallelism_does_not_change_results():
    grid = [Cell(), Cell(camera="pinhole", noise=NoiseSpec(level=0.5))]
    a = run_experiment(grid, trials=12, parallelism=1, chunk_size=5)
    b = run_experiment(grid, trials=12, parallelism=2, chunk_size=5)
    strip = [{k: v for k, v in r.items() if k != "mean_wall_time"} for r in a]
    assert strip == [{k: v for k, v in r.items() if k != "mean_wall_time"} for r in b]


def test_rows_layout():
    rows = run_experiment([Cell(scene=SceneConfig(translation_enabled=False))], trials=3)
    assert [r["estimator"] for r in rows] == ["nec", "pnec"]
    assert all(r["mean_e_t"] is None and r["failures"] == 0 for r in rows)
    assert all(np.isfinite(r["median_energy"]) for r in rows)


def test_failures_are_counted(monkeypatch):
    import pnec.simulation as sim

    def broken(name, f, fp, cov, config, R0):
        raise ArithmeticError("boom")

    monkeypatch.setattr(sim, "_estimate_stack", broken)
    rows = run_experiment([Cell()], trials=4, estimators=("pnec",))
    assert rows[0]["failures"] == 4 and np.isnan(rows[0]["mean_e_rot"])


def test_run_experiment_validation():
    with pytest.raises(ValueError):
        run_experiment([Cell()], trials=0)


def test_default_solver_config_used():
    rows = run_experiment([Cell()], trials=2, config=SolverConfig(outer_iterations=2))
    assert len(rows) == 2
