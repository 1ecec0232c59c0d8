import json

import numpy as np
import pytest
from hypothesis import given, settings

from pnec.energy import CorrespondenceSet, gram_matrix, nec_energy, pnec_energy
from pnec.errors import DegenerateConfigurationError
from pnec.geometry import cayley_to_rotation, complete_basis, rotation_angle
from pnec.optimizer import (RelativePose, SolverConfig, fibonacci_lattice, joint_jacobian,
                            joint_refinement, joint_residuals, nec_estimate, nec_translation,
                            pnec_estimate, resolve_translation_sign, rotation_objective,
                            rotation_objective_gradient, rotation_step, scf_e_matrix,
                            scf_optimize, smallest_eigenpair)
from pnec.optimizer.refinement import EQUATOR
from pnec.optimizer.scf import _energy_hessian, scf_terms
from pnec.simulation import generate_instance

from conftest import exact_problem, random_rotation, random_spd, random_unit, seeds


def noisy_problem(seed, camera="omni"):
    inst = generate_instance(camera=camera, seed=seed)
    return inst.correspondences, inst.truth.rotation, inst.truth.translation


def degrees(R1, R2):
    return np.degrees(rotation_angle(R1.T @ R2))


# lattice

def test_lattice_two_points_are_poles():
    assert np.allclose(fibonacci_lattice(2), [[0, 1, 0], [0, -1, 0]], atol=1e-15)


def test_lattice_three_points():
    ga = np.pi * (3 - np.sqrt(5))
    assert np.allclose(fibonacci_lattice(3)[1], [np.cos(ga), 0, np.sin(ga)])


def test_lattice_unit_and_spread():
    p = fibonacci_lattice(500)
    assert np.allclose(np.linalg.norm(p, axis=1), 1)
    d = p @ p.T
    np.fill_diagonal(d, -1)
    assert np.degrees(np.arccos(d.max())) > 4


def test_lattice_rejects_small_k():
    with pytest.raises(ValueError):
        fibonacci_lattice(1)


# eigen step

def test_smallest_eigenpair_diagonal():
    v, lam = smallest_eigenpair(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(np.abs(v), [0, 0, 1]) and lam == pytest.approx(1.0)


def test_nec_translation_minimizes(rng):
    cs, R, _ = noisy_problem(3)
    t, lam = nec_translation(cs, R)
    M = gram_matrix(cs.f_host, cs.f_target, R)
    samples = random_unit(rng, 20000)
    assert lam <= np.einsum("ni,ij,nj->n", samples, M, samples).min() + 1e-15


def test_nec_translation_noise_free(rng):
    cs, R, t = exact_problem(rng)
    t_est, lam = nec_translation(cs, R)
    assert lam < 1e-18 and abs(abs(t_est @ t) - 1) < 1e-9


# SCF

def test_e_matrix_reduces_for_zero_covariance(rng):
    cs, R, _ = noisy_problem(4)
    t = random_unit(rng)
    zero = np.zeros_like(cs.cov_target)
    E = scf_e_matrix(cs.f_host, cs.f_target, zero, R, t, 1.0)
    assert np.allclose(E, gram_matrix(cs.f_host, cs.f_target, R) - nec_energy(cs.f_host, cs.f_target, R, t) * np.eye(3))


def test_e_matrix_single_pair(rng):
    f, fp = random_unit(rng, 1), random_unit(rng, 1)
    cov = random_spd(rng, scale=1e-3)[None]
    R, t = random_rotation(rng), random_unit(rng)
    n = np.cross(f[0], R @ fp[0])
    S = np.array([[0, -f[0, 2], f[0, 1]], [f[0, 2], 0, -f[0, 0]], [-f[0, 1], f[0, 0], 0]])
    Bm = S @ R @ cov[0] @ R.T @ S.T + 1e-3 * np.eye(3)
    b, a = t @ Bm @ t, (n @ t) ** 2
    expected = (b * np.outer(n, n) - a * Bm) / b**2
    assert np.allclose(scf_e_matrix(f, fp, cov, R, t, 1e-3), expected, atol=1e-12)


def test_e_matrix_times_t_is_half_gradient(rng):
    """E(t) t equals half the Euclidean energy gradient (finite differences)."""
    cs, R, _ = noisy_problem(5)
    t = random_unit(rng)
    c = 1e-10
    E = scf_e_matrix(*_args(cs), R, t, c)
    h = 1e-7
    grad = np.array([(pnec_energy(*_args(cs), R, t + h * e, c) - pnec_energy(*_args(cs), R, t - h * e, c)) / (2 * h)
                     for e in np.eye(3)])
    # the energy is scale invariant only on the sphere: compare tangent parts
    P = np.eye(3) - np.outer(t, t)
    assert np.allclose(P @ (2 * E @ t), P @ grad, rtol=1e-5, atol=1e-6 * np.abs(grad).max())


def _args(cs):
    return cs.f_host, cs.f_target, cs.cov_target


def test_scf_hessian_matches_finite_difference(rng):
    cs, R, _ = noisy_problem(6)
    n, B = scf_terms(*_args(cs), R, 1e-10)
    t = random_unit(rng)
    def hess(v):
        g, H = _energy_hessian(n[None], B[None], v[None])
        return g[0], H[0]

    grad, H = hess(t)
    h = 1e-6
    fd = np.stack([(hess(t + h * e)[0] - hess(t - h * e)[0]) / (2 * h)
                   for e in np.eye(3)], axis=1)
    assert np.linalg.norm(H - fd) / np.linalg.norm(H) < 1e-5


def test_scf_noise_free(rng):
    cs, R, t = exact_problem(rng)
    t_est = scf_optimize(cs, R)
    assert np.degrees(np.arccos(min(1.0, abs(t_est @ t)))) < 0.1


def test_scf_matches_nec_without_covariance():
    cs, R, _ = noisy_problem(7)
    plain = CorrespondenceSet(cs.f_host, cs.f_target, np.zeros_like(cs.cov_target))
    t_scf = scf_optimize(plain, R, SolverConfig(regularization=1.0))
    t_nec, _ = nec_translation(cs, R)
    assert np.degrees(np.arccos(min(1.0, abs(t_scf @ t_nec)))) < 0.01


@settings(max_examples=20)
@given(seeds)
def test_scf_beats_lattice(seed):
    cs, R, _ = noisy_problem(seed % 10000)
    t = scf_optimize(cs, R)
    e = pnec_energy(*_args(cs), R, t)
    lattice = fibonacci_lattice(500)
    best = min(pnec_energy(*_args(cs), R, p) for p in lattice)
    assert e <= best * (1 + 1e-9)


@settings(max_examples=20)
@given(seeds)
def test_scf_fixed_point(seed):
    cs, R, _ = noisy_problem(seed % 10000)
    t = scf_optimize(cs, R)
    E = scf_e_matrix(*_args(cs), R, t, 1e-10)
    r = E @ t - (t @ E @ t) * t
    assert np.linalg.norm(r) <= 1e-8 * max(1.0, np.linalg.norm(E))


# rotation step

def test_rotation_gradient_finite_difference():
    cs, R, _ = noisy_problem(8)
    w = np.linspace(0.5, 2, len(cs))
    lam, grad = rotation_objective_gradient(cs.f_host, cs.f_target, w, R)
    h = 1e-6
    fd = np.array([(rotation_objective(cs.f_host, cs.f_target, w, cayley_to_rotation(h * e) @ R)[0]
                    - rotation_objective(cs.f_host, cs.f_target, w, cayley_to_rotation(-h * e) @ R)[0]) / (2 * h)
                   for e in np.eye(3)])
    assert np.allclose(grad, fd, rtol=1e-5, atol=1e-12)


def test_rotation_step_recovers_noise_free(rng):
    cs, R, _ = exact_problem(rng)
    R0 = random_rotation(rng, np.radians(1)) @ R
    R_est = rotation_step(cs, np.ones(len(cs)), R0)
    assert degrees(R_est, R) < 1e-6


def test_rotation_step_does_not_increase(rng):
    for seed in range(10):
        cs, R, _ = noisy_problem(seed)
        w = rng.uniform(0.5, 2, len(cs))
        R0 = random_rotation(rng, 0.1) @ R
        before = rotation_objective(cs.f_host, cs.f_target, w, R0)[0]
        after = rotation_objective(cs.f_host, cs.f_target, w, rotation_step(cs, w, R0))[0]
        assert after <= before


# joint refinement

def test_joint_jacobian_finite_difference(rng):
    cs, R, t = noisy_problem(9)
    Q = complete_basis(t)
    th, ph = EQUATOR
    J = joint_jacobian(*_args(cs), R, Q, th, ph, 1e-3)
    base = np.array([0, 0, 0, th, ph], float)
    h = 1e-6
    fd = np.stack([(joint_residuals(*_args(cs), R, Q, base + h * e, 1e-3)
                    - joint_residuals(*_args(cs), R, Q, base - h * e, 1e-3)) / (2 * h)
                   for e in np.eye(5)], axis=1)
    assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-6


def test_refinement_monotone_trace():
    cs, R, t = noisy_problem(10)
    report = pnec_estimate(cs, R_init=R)
    trace = report.energy_trace["refinement"]
    assert np.all(np.diff(trace) <= 0)
    assert report.final_energy <= pnec_energy(*_args(cs), report.pose.rotation, report.pose.translation) * (1 + 1e-12)


def test_refinement_fixed_point_at_truth(rng):
    cs, R, t = exact_problem(rng)
    pose, accepted = joint_refinement(cs, SolverConfig(), RelativePose(R, t))
    assert accepted == 0 and pose.rotation is R


def test_refinement_requires_positive_c(rng):
    cs, R, t = exact_problem(rng)
    with pytest.raises(ValueError):
        joint_refinement(cs, SolverConfig(regularization=0.0), RelativePose(R, t))


# full estimators

def test_pnec_noise_free(rng):
    cs, R, t = exact_problem(rng, n=20)
    report = pnec_estimate(cs, R_init=random_rotation(rng, 0.05) @ R)
    assert degrees(report.pose.rotation, R) < 1e-6
    assert np.degrees(np.arccos(min(1.0, report.pose.translation @ t))) < 1e-6


def test_nec_noise_free(rng):
    cs, R, t = exact_problem(rng, n=20)
    report = nec_estimate(cs, R_init=random_rotation(rng, 0.05) @ R)
    assert degrees(report.pose.rotation, R) < 1e-6
    assert np.degrees(np.arccos(min(1.0, report.pose.translation @ t))) < 1e-6


def test_pnec_reduces_to_nec():
    """No covariance, c = 1, fixed weights and no refinement: NEC rotation."""
    for seed in range(5):
        cs, R, _ = noisy_problem(seed)
        plain = CorrespondenceSet(cs.f_host, cs.f_target, np.zeros_like(cs.cov_target))
        cfg = SolverConfig(regularization=1.0, reweight=False, joint_refinement=False)
        R0 = cayley_to_rotation([0.01, -0.02, 0.01]) @ R
        a = pnec_estimate(plain, cfg, R_init=R0).pose.rotation
        b = nec_estimate(cs, R_init=R0).pose.rotation
        assert degrees(a, b) < 0.01


def test_translation_sign_follows_bearings(rng):
    cs, R, t = exact_problem(rng)
    assert resolve_translation_sign(cs.f_host, cs.f_target, R, -t) @ t > 0
    flipped = CorrespondenceSet(-cs.f_host, -cs.f_target, cs.cov_target)
    assert resolve_translation_sign(flipped.f_host, flipped.f_target, R, t) @ t < 0


def test_parallel_bearings_rejected():
    f = np.tile([0.0, 0.0, 1.0], (6, 1))
    fp = random_unit(np.random.default_rng(0), 6)
    cs = CorrespondenceSet(f, fp, np.zeros((6, 3, 3)))
    with pytest.raises(DegenerateConfigurationError):
        pnec_estimate(cs)
    with pytest.raises(DegenerateConfigurationError):
        nec_estimate(cs)


def test_report_is_deterministic_and_serializable():
    cs, R, _ = noisy_problem(11)
    a = pnec_estimate(cs, R_init=R)
    b = pnec_estimate(cs, R_init=R)
    assert np.array_equal(a.pose.rotation, b.pose.rotation)
    assert np.array_equal(a.pose.translation, b.pose.translation)
    d = json.loads(json.dumps(a.to_dict()))
    assert set(d) >= {"rotation", "translation", "final_energy", "energy_trace", "iterations_used"}
    assert d["iterations_used"]["outer"] == 10


def test_pnec_improves_on_nec_energy():
    for seed in range(5):
        cs, R, _ = noisy_problem(seed)
        p = pnec_estimate(cs, R_init=R)
        n = nec_estimate(cs, R_init=R)
        assert p.final_energy <= pnec_energy(*_args(cs), n.pose.rotation, n.pose.translation) * (1 + 1e-9)


def test_relative_pose_validation():
    with pytest.raises(ValueError):
        RelativePose(2 * np.eye(3), np.array([0.0, 0, 1]))
    with pytest.raises(ValueError):
        RelativePose(np.eye(3), np.array([0.0, 0, 2]))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(outer_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(regularization=-1)
