"""Joint refinement of rotation and translation on the whitened residuals.

Parameters per LM step are a left Cayley increment ``x`` for the rotation
and spherical angles ``(theta, phi)`` for the translation, measured in a
frame ``Q`` chosen so that the current translation sits at the equator
point ``(pi/2, 0)`` where the chart is regular. The frame is re-centred
after every accepted step.
"""
from __future__ import annotations

import numpy as np

from ..energy import epipolar_normals, residual_variances, rotated_covariances
from ..geometry import (cayley_to_rotation, complete_basis, cross, spherical_jacobian,
                        spherical_to_unit)
from .rotation import LMSchedule, _damped_solve

EQUATOR = (0.5 * np.pi, 0.0)


def chart_translation(Q, theta, phi):
    return np.einsum("...ij,...j->...i", Q, spherical_to_unit(theta, phi))


def joint_residuals(f, fp, cov, R0, Q, params, c):
    """Whitened residuals at ``R = cay(x) R0``, ``t = Q sph(theta, phi)``.

    ``params`` is ``(..., 5)`` = ``(x1, x2, x3, theta, phi)``.
    """
    params = np.asarray(params, dtype=float)
    R = cayley_to_rotation(params[..., :3]) @ R0
    t = chart_translation(Q, params[..., 3], params[..., 4])
    n = epipolar_normals(f, fp, R)
    e = np.einsum("...ni,...i->...n", n, t)
    return e / np.sqrt(residual_variances(f, cov, R, t, c))


def joint_jacobian(f, fp, cov, R0, Q, theta, phi, c):
    """Analytic d r / d params at ``x = 0``; shape ``(..., N, 5)``.

    With ``a = t^T n``, ``s^2 = u^T P u + c``, ``u = t x f``,
    ``P = R Sigma R^T``:
    ``da/dx = -2 ((t x f) x g)``, ``d s^2/dx = 4 (P u) x u``,
    ``da/dt = n``, ``d s^2/dt = 2 [f]x P [f]x^T t``.
    """
    t = chart_translation(Q, theta, phi)
    g = np.einsum("...ij,...nj->...ni", R0, fp)
    n = cross(f, g)
    u = cross(t[..., None, :], f)
    P = rotated_covariances(cov, R0)
    Pu = np.einsum("...nij,...nj->...ni", P, u)
    a = np.einsum("...ni,...i->...n", n, t)
    s2 = np.einsum("...ni,...ni->...n", u, Pu) + c
    s = np.sqrt(s2)

    da_dx = -2.0 * cross(u, g)
    ds2_dx = 4.0 * cross(Pu, u)
    # d(u^T P u)/dt with u = t x f = -[f]x t  ->  2 (f x P u)
    ds2_dt = 2.0 * cross(f, Pu)
    dt = np.einsum("...ij,...jk->...ik", Q, spherical_jacobian(theta, phi))  # (..., 3, 2)
    da_dang = np.einsum("...ni,...ik->...nk", n, dt)
    ds2_dang = np.einsum("...ni,...ik->...nk", ds2_dt, dt)

    d_a = np.concatenate([da_dx, da_dang], axis=-1)
    d_s2 = np.concatenate([ds2_dx, ds2_dang], axis=-1)
    return d_a / s[..., None] - (a / (2.0 * s2 * s))[..., None] * d_s2


def joint_refinement_batch(f, fp, cov, R, t, c, schedule=None):
    """Vectorized LM; returns ``(R, t, energy, iterations, accepted, trace)``.

    ``trace`` is ``(..., max_iterations + 1)`` energies after each accepted
    step, NaN-padded.
    """
    s = schedule or LMSchedule()
    batch = R.shape[:-2]
    mu = np.full(batch, s.initial_damping)
    theta = np.full(batch, EQUATOR[0])
    phi = np.full(batch, EQUATOR[1])
    zeros5 = np.zeros(batch + (5,))
    zeros5[..., 3] = EQUATOR[0]
    Q = complete_basis(t)
    r = joint_residuals(f, fp, cov, R, Q, zeros5, c)
    energy = np.sum(r * r, axis=-1)
    floor = _roundoff_floor(f, fp, cov, R, t, c)
    trace = np.full(batch + (s.max_iterations + 1,), np.nan)
    trace[..., 0] = energy
    accepted = np.zeros(batch, dtype=int)
    iterations = np.zeros(batch, dtype=int)
    active = np.ones(batch, dtype=bool)
    for _ in range(s.max_iterations):
        if not active.any():
            break
        J = joint_jacobian(f, fp, cov, R, Q, theta, phi, c)
        H = np.einsum("...nk,...nl->...kl", J, J)
        grad = np.einsum("...nk,...n->...k", J, r)
        step = _damped_solve(H, grad, mu)
        params = zeros5 + step
        r_new = joint_residuals(f, fp, cov, R, Q, params, c)
        e_new = np.sum(r_new * r_new, axis=-1)
        accept = active & (e_new < energy - floor)
        reject = active & ~accept
        small = accept & ((energy - e_new) <= s.tolerance * np.abs(energy))
        R_new = cayley_to_rotation(step[..., :3]) @ R
        t_new = chart_translation(Q, params[..., 3], params[..., 4])
        R = np.where(accept[..., None, None], R_new, R)
        t = np.where(accept[..., None], t_new, t)
        r = np.where(accept[..., None], r_new, r)
        energy = np.where(accept, e_new, energy)
        Q = np.where(accept[..., None, None], complete_basis(t), Q)
        accepted += accept
        trace = _record(trace, accepted, accept, energy)
        iterations += active
        mu = np.where(accept, mu * s.decrease, np.where(reject, mu * s.increase, mu))
        overflow = reject & (mu > s.max_damping)
        active &= ~(small | overflow)
    return R, t, energy, iterations, accepted, trace


def _roundoff_floor(f, fp, cov, R, t, c):
    """Energy changes below this are rounding noise in the residuals.

    Each ``e_i = t^T n_i`` carries an error of a few ``eps |n_i|``, so
    each whitened residual is uncertain by ``eps |n_i| / sigma_i``.
    """
    n = epipolar_normals(f, fp, R)
    s2 = residual_variances(f, cov, R, t, c)
    unit = 8.0 * np.finfo(float).eps
    return np.sum(unit * unit * np.sum(n * n, axis=-1) / s2, axis=-1)


def _record(trace, accepted, accept, energy):
    idx = np.where(accept, accepted, 0)
    vals = np.where(accept, energy, np.take_along_axis(trace, idx[..., None], axis=-1)[..., 0])
    np.put_along_axis(trace, idx[..., None], vals[..., None], axis=-1)
    return trace
