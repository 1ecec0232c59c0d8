"""Rotation step: minimize ``lambda_min(M_P(R))`` with Levenberg-Marquardt.

The rotation is updated by left-composed Cayley increments,
``R <- cay(x) R``. For the current minimizing eigenvector ``t`` the
objective equals ``sum_i r_i^2`` with ``r_i = t^T n_i / w_i``, and by the
envelope theorem its gradient is ``2 J^T r`` where ``J`` holds the
derivatives of ``r_i`` at fixed ``t``. The curvature is the Gauss-Newton
term ``J^T J`` plus the second-order eigenvalue perturbation term
``-sum_k c_k c_k^T / (lambda_k - lambda_0)``, which accounts for the
eigenvector turning with ``R``; without it the model overestimates the
curvature whenever the eigen-gap is small and LM crawls.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..energy import rotate_targets
from ..geometry import cayley_to_rotation, cross
from .eigen import smallest_eigenpair


@dataclass
class LMSchedule:
    initial_damping: float = 1e-6
    increase: float = 10.0
    decrease: float = 0.3
    max_iterations: int = 50
    tolerance: float = 1e-10
    max_damping: float = 1e16


def weighted_normals(f, fp, weights, R):
    g = rotate_targets(fp, R)
    return cross(f, g) / weights[..., None], g


def rotation_objective(f, fp, weights, R):
    """``lambda_min`` of the weighted Gramian and its eigenvector."""
    n, _ = weighted_normals(f, fp, weights, R)
    M = np.einsum("...ni,...nj->...ij", n, n)
    t, _ = smallest_eigenpair(M)
    return _residual_energy(n, t), t


def _residual_energy(n, t):
    # sum of squared residuals: unlike t^T M t its roundoff scales with
    # the value, so LM keeps seeing decreases down to ~eps rotation error
    r = np.einsum("...ni,...i->...n", n, t)
    return np.sum(r * r, axis=-1)


def rotation_residual_jacobian(f, g, weights, t):
    """d r_i / d x at x = 0 for r_i = t^T (f_i x cay(x) g_i) / w_i.

    ``d cay(x) g / dx = -2 [g]x`` at zero, so
    ``t^T [f]x (-2 [g]x) = -2 ((t x f) x g)^T``.
    """
    tf = cross(t[..., None, :], f)
    return -2.0 * cross(tf, g) / weights[..., None]


def rotation_objective_gradient(f, fp, weights, R):
    """Objective value and its gradient w.r.t. a left Cayley increment."""
    n, g = weighted_normals(f, fp, weights, R)
    M = np.einsum("...ni,...nj->...ij", n, n)
    t, _ = smallest_eigenpair(M)
    J = rotation_residual_jacobian(f, g, weights, t)
    r = np.einsum("...ni,...i->...n", n, t)
    return np.sum(r * r, axis=-1), 2.0 * np.einsum("...ni,...n->...i", J, r)


def _damped_solve(H, grad, mu):
    diag = np.diagonal(H, axis1=-2, axis2=-1)
    floor = 1e-12 * np.sum(diag, axis=-1, keepdims=True) + 1e-300
    A = H + (mu[..., None] * (diag + floor))[..., None] * np.eye(H.shape[-1])
    return -np.linalg.solve(A, grad[..., None])[..., 0]


def _lm_system(f, fp, weights, R):
    """Objective, eigenvector and the (halved) gradient and curvature."""
    n, g = weighted_normals(f, fp, weights, R)
    M = np.einsum("...ni,...nj->...ij", n, n)
    vals, vecs = np.linalg.eigh(M)
    # residuals and Jacobians for all three eigenvectors at once
    V = np.swapaxes(vecs, -1, -2)
    S = np.einsum("...ni,...ki->...kn", n, V)
    Js = rotation_residual_jacobian(f[..., None, :, :], g[..., None, :, :],
                                    weights[..., None, :], V)
    r, J = S[..., 0, :], Js[..., 0, :, :]
    lam = np.sum(r * r, axis=-1)
    H = np.einsum("...ni,...nj->...ij", J, J)
    for k in (1, 2):
        c_k = (np.einsum("...n,...na->...a", S[..., k, :], J)
               + np.einsum("...n,...na->...a", r, Js[..., k, :, :]))
        gap = np.maximum(vals[..., k] - lam, 1e-300)
        H = H - c_k[..., :, None] * c_k[..., None, :] / gap[..., None, None]
    # the perturbation term can make H indefinite; flip negative curvature
    # so every damped step is a descent direction
    hv, hq = np.linalg.eigh(H)
    H = np.einsum("...ik,...k,...jk->...ij", hq, np.abs(hv), hq)
    grad = np.einsum("...ni,...n->...i", J, r)
    return lam, H, grad


def rotation_step_batch(f, fp, weights, R, schedule=None):
    """Vectorized LM over a batch; returns ``(R, objective, iterations, stalled)``.

    ``stalled`` marks instances stopped by damping overflow rather than by
    the relative-decrease tolerance or the iteration cap.
    """
    s = schedule or LMSchedule()
    batch = R.shape[:-2]
    mu = np.full(batch, s.initial_damping)
    lam, H, grad = _lm_system(f, fp, weights, R)
    active = np.ones(batch, dtype=bool)
    stalled = np.zeros(batch, dtype=bool)
    iterations = np.zeros(batch, dtype=int)
    for _ in range(s.max_iterations):
        if not active.any():
            break
        x = _damped_solve(H, grad, mu)
        R_new = cayley_to_rotation(x) @ R
        lam_new, H_new, grad_new = _lm_system(f, fp, weights, R_new)
        accept = active & (lam_new < lam)
        reject = active & ~accept
        small = accept & ((lam - lam_new) <= s.tolerance * np.abs(lam))
        R = np.where(accept[..., None, None], R_new, R)
        H = np.where(accept[..., None, None], H_new, H)
        grad = np.where(accept[..., None], grad_new, grad)
        lam = np.where(accept, lam_new, lam)
        mu = np.where(accept, mu * s.decrease, np.where(reject, mu * s.increase, mu))
        iterations += active
        overflow = reject & (mu > s.max_damping)
        stalled |= overflow
        active &= ~(small | overflow)
    return R, lam, iterations, stalled


def rotation_step(correspondences, weights, R_init, schedule=None):
    """Single-problem wrapper around ``rotation_step_batch``."""
    weights = np.asarray(weights, dtype=float)
    R, lam, its, stalled = rotation_step_batch(
        correspondences.f_host, correspondences.f_target, weights,
        np.asarray(R_init, dtype=float), schedule)
    return R
