"""Numerical self-checks run by ``pnec selftest``.

Each suite returns ``(name, ok, detail)``.
"""
from __future__ import annotations

import numpy as np

from .energy import directional_limit, gram_matrix, pnec_energy
from .geometry import axis_angle_to_rotation, cayley_to_rotation, complete_basis, normalize
from .optimizer.eigen import nec_translation
from .optimizer.lattice import fibonacci_lattice
from .optimizer.refinement import EQUATOR, joint_jacobian, joint_residuals
from .optimizer.rotation import rotation_objective, rotation_objective_gradient
from .optimizer.scf import _e_matrix, scf_from_lattice, scf_terms
from .simulation import NoiseSpec, SceneConfig, generate_instance

ORACLE_LATTICE = 100_000
FIXED_POINT_TOL = 1e-8
LIMIT_THETA = 1e-4
LIMIT_TOL = 1e-4
GRADIENT_TOL = 1e-4


def random_problem(seed, camera="omni", level=1.0):
    """A seeded synthetic instance: ``(correspondences, R_true, t_true)``."""
    inst = generate_instance(SceneConfig(), NoiseSpec(level=level), camera, seed)
    return inst.correspondences, inst.truth.rotation, inst.truth.translation


def random_rotation(rng, max_angle=np.pi):
    return axis_angle_to_rotation(normalize(rng.standard_normal(3)), rng.uniform(0, max_angle))


def lattice_minimum(M, K=ORACLE_LATTICE):
    pts = fibonacci_lattice(K)
    return float(np.min(np.einsum("ki,ij,kj->k", pts, M, pts)))


def eigen_oracle_suite(trials=20, seed=0):
    """``lambda_min`` is a lower bound of the lattice minimum, and close to it.

    The lattice minimum exceeds ``lambda_min`` by at most
    ``(lambda_max - lambda_min) sin^2 h`` where ``h`` bounds the angular
    distance to the nearest lattice point; ``h = sqrt(4 pi / K)`` is a
    generous bound.
    """
    rng = np.random.default_rng(seed)
    h2 = np.sin(np.sqrt(4 * np.pi / ORACLE_LATTICE)) ** 2
    worst = 0.0
    for k in range(trials):
        cs, R, _ = random_problem(seed + k)
        R = random_rotation(rng, 0.1) @ R
        _, lam = nec_translation(cs, R)
        M = gram_matrix(cs.f_host, cs.f_target, R)
        brute = lattice_minimum(M)
        vals = np.linalg.eigvalsh(M)
        slack = (vals[2] - vals[0]) * h2 + 1e-12
        if lam > brute + 1e-12 or brute - lam > slack:
            return "eigen-oracle", False, f"trial {k}: lambda {lam:.3e}, lattice {brute:.3e}"
        worst = max(worst, (brute - lam) / slack)
    return "eigen-oracle", True, f"{trials} sets, worst gap {worst:.2f} of the lattice bound"


def scf_fixed_point_suite(trials=20, seed=0, c=1e-10):
    """SCF output satisfies ``E(t) t = (t^T E t) t``."""
    rng = np.random.default_rng(seed)
    pts = fibonacci_lattice(500)
    worst = 0.0
    for k in range(trials):
        cs, R, _ = random_problem(seed + k)
        R = random_rotation(rng, 0.02) @ R
        n, B = scf_terms(cs.f_host, cs.f_target, cs.cov_target, R, c)
        t, _, _ = scf_from_lattice(n, B, pts, 10)
        E = _e_matrix(n, B, t)
        res = float(np.linalg.norm(E @ t - (t @ E @ t) * t))
        worst = max(worst, res)
    ok = worst <= FIXED_POINT_TOL
    return "scf-fixed-point", ok, f"{trials} instances, worst residual {worst:.2e}"


def limit_residual(pair, R, k, theta):
    """Unregularized squared residual at ``t`` turned by ``theta`` off ``f``.

    ``t = cos(theta) f + sin(theta) (f x k)`` gives ``t x f = sin(theta) k``.
    """
    f = pair.f_host
    t = np.cos(theta) * f + np.sin(theta) * np.cross(f, k)
    return float(pnec_energy(f[None], pair.f_target[None], pair.cov_target[None], R, t, 0.0))


def tangent_direction(f, rng):
    return normalize(np.cross(f, rng.standard_normal(3)))


def limit_check_suite(trials=20, seed=0):
    """Residual near ``t = f`` approaches the directional limit, which depends on direction."""
    rng = np.random.default_rng(seed)
    worst, distinct = 0.0, 0
    for k in range(trials):
        cs, R, _ = random_problem(seed + k)
        pair = cs[int(rng.integers(len(cs)))]
        k1, k2 = tangent_direction(pair.f_host, rng), tangent_direction(pair.f_host, rng)
        lim1, lim2 = directional_limit(k1, pair, R), directional_limit(k2, pair, R)
        val = limit_residual(pair, R, k1, LIMIT_THETA)
        worst = max(worst, abs(val - lim1) / abs(lim1))
        distinct += abs(lim1 - lim2) > 1e-3 * max(abs(lim1), abs(lim2))
    ok = worst <= LIMIT_TOL and distinct == trials
    return "limit-check", ok, f"worst relative gap {worst:.2e}, {distinct}/{trials} direction pairs distinct"


def _relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def joint_jacobian_fd(f, fp, cov, R, Q, c, h=1e-6):
    base = np.array([0.0, 0.0, 0.0, EQUATOR[0], EQUATOR[1]])
    cols = []
    for j in range(5):
        d = np.zeros(5)
        d[j] = h
        cols.append((joint_residuals(f, fp, cov, R, Q, base + d, c)
                     - joint_residuals(f, fp, cov, R, Q, base - d, c)) / (2 * h))
    return np.stack(cols, axis=-1)


def rotation_gradient_fd(f, fp, weights, R, h=1e-6):
    g = np.zeros(3)
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        lp, _ = rotation_objective(f, fp, weights, cayley_to_rotation(d) @ R)
        lm, _ = rotation_objective(f, fp, weights, cayley_to_rotation(-d) @ R)
        g[j] = (lp - lm) / (2 * h)
    return g


def gradient_check_suite(trials=20, seed=0, c=1e-3):
    """Analytic derivatives against central finite differences."""
    rng = np.random.default_rng(seed)
    worst_joint = worst_rot = 0.0
    for k in range(trials):
        cs, R, t = random_problem(seed + k)
        R = random_rotation(rng, 0.2) @ R
        t = normalize(t + 0.3 * rng.standard_normal(3))
        f, fp, cov = cs.f_host, cs.f_target, cs.cov_target
        Q = complete_basis(t)
        J = joint_jacobian(f, fp, cov, R, Q, EQUATOR[0], EQUATOR[1], c)
        worst_joint = max(worst_joint, _relative_error(J, joint_jacobian_fd(f, fp, cov, R, Q, c)))
        w = rng.uniform(0.5, 2.0, len(cs))
        _, grad = rotation_objective_gradient(f, fp, w, R)
        worst_rot = max(worst_rot, _relative_error(grad, rotation_gradient_fd(f, fp, w, R)))
    ok = max(worst_joint, worst_rot) <= GRADIENT_TOL
    return "gradient-check", ok, f"joint Jacobian {worst_joint:.2e}, rotation gradient {worst_rot:.2e}"


SUITES = (eigen_oracle_suite, scf_fixed_point_suite, limit_check_suite, gradient_check_suite)


def run_selftest(trials=20, seed=0):
    return [suite(trials=trials, seed=seed) for suite in SUITES]
