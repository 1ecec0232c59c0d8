"""Translation step: SCF iteration on the sum of generalized Rayleigh quotients.

For a fixed rotation the PNEC energy is ``sum_i t^T A_i t / t^T B_i t`` with
``A_i = n_i n_i^T`` and ``B_i = Sigma_n,i + c I``. Starting from the best
point of a Fibonacci lattice, each step rebuilds the symmetric matrix
``E(t) = sum_i w_i (t^T B_i t A_i - t^T A_i t B_i)``, ``w_i = (t^T B_i t)^-2``,
and moves to its extremal eigenvector. ``E(t) t`` is proportional to the
energy gradient, so stationary points satisfy ``E(t) t = 0``; for a
minimization the iteration follows the eigenvector of the *smallest*
eigenvalue.

Near some minima ``E`` has a small negative eigenvalue, and the plain step
then jumps away. Steps that do not decrease the energy are retried with
the level-shifted matrix ``E - sigma t t^T``: it has the same fixed points,
and as ``sigma`` grows its smallest eigenvector approaches a short
gradient step, so every accepted iterate decreases the energy.

Where a minimum is an unstable fixed point of the plain map, the shifted
steps approach it only linearly and soon stall at energy roundoff. A few
Riemannian Newton steps on the energy finish the iteration; they share
the SCF fixed points and converge quadratically.
"""
from __future__ import annotations

import numpy as np

from ..energy import epipolar_normals, normal_covariances
from ..errors import SingularityError
from ..geometry import complete_basis, normalize
from .eigen import smallest_eigenpair
from .lattice import fibonacci_lattice


def scf_terms(f, fp, cov, R, c):
    """Per-correspondence ``(n_i, B_i)`` for a fixed rotation."""
    n = epipolar_normals(f, fp, R)
    B = normal_covariances(f, cov, R) + c * np.eye(3)
    return n, B


def scf_e_matrix(f, fp, cov, R, t, c):
    n, B = scf_terms(f, fp, cov, R, c)
    return _e_matrix(n, B, t)


def _e_matrix(n, B, t):
    tBt = np.einsum("...i,...nij,...j->...n", t, B, t)
    if np.any(tBt <= 0):
        raise SingularityError("t^T B_i t must be positive; use c > 0")
    tn = np.einsum("...ni,...i->...n", n, t)
    w = 1.0 / (tBt * tBt)
    A_part = np.einsum("...n,...ni,...nj->...ij", w * tBt, n, n)
    B_part = np.einsum("...n,...nij->...ij", w * tn * tn, B)
    E = A_part - B_part
    return 0.5 * (E + np.swapaxes(E, -1, -2))


def _energy(n, B, t):
    tn = np.einsum("...ni,...i->...n", n, t)
    tBt = np.einsum("...i,...nij,...j->...n", t, B, t)
    return np.sum(tn * tn / tBt, axis=-1)


def lattice_energies(n, B, points):
    """PNEC energy of every lattice point; ``(..., K)``."""
    num = np.einsum("...ni,ki->...kn", n, points) ** 2
    outer = (points[:, :, None] * points[:, None, :]).reshape(len(points), 9)
    den = np.einsum("...nq,kq->...kn", B.reshape(B.shape[:-2] + (9,)), outer)
    return np.sum(num / den, axis=-1)


_NEWTON_STEPS = 3
# energy increase tolerated for a Newton step, relative to the energy
_ROUNDOFF = 1e-12
_SHIFT_FACTORS = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)


def _aligned_smallest(M, t):
    _, vecs = np.linalg.eigh(M)
    v = vecs[..., :, 0]
    sign = np.where(np.einsum("...i,...i->...", v, t) < 0, -1.0, 1.0)
    return v * sign[..., None]


def _shifted_step(n, B, t, E, vals, e):
    """Level-shifted retries for a flat batch; returns ``(t, e)``."""
    t_out, e_out = t.copy(), e.copy()
    pending = np.ones(len(t), dtype=bool)
    P = t[:, :, None] * t[:, None, :]
    base = np.maximum(-vals[:, 0], 0.0)
    spread = vals[:, 2] - vals[:, 0]
    for a in _SHIFT_FACTORS:
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        sigma = base[idx] + a * spread[idx]
        v = _aligned_smallest(E[idx] - sigma[:, None, None] * P[idx], t[idx])
        ev = _energy(n[idx], B[idx], v)
        ok = ev < e[idx]
        t_out[idx[ok]] = v[ok]
        e_out[idx[ok]] = ev[ok]
        pending[idx[ok]] = False
    return t_out, e_out


def _outer(x, y):
    return x[..., :, None] * y[..., None, :]


def _energy_hessian(n, B, t):
    """Euclidean gradient and Hessian of ``sum a_i / b_i`` at ``t``."""
    tn = np.einsum("bni,bi->bn", n, t)
    At = n * tn[..., None]
    Bt = np.einsum("bnij,bj->bni", B, t)
    a = tn * tn
    b = np.einsum("bni,bi->bn", Bt, t)
    grad = 2.0 * np.einsum("bni->bi", At / b[..., None] - (a / b**2)[..., None] * Bt)
    H = (2.0 * _outer(n, n) / b[..., None, None]
         - (2.0 * a / b**2)[..., None, None] * B
         - (4.0 / b**2)[..., None, None] * (_outer(At, Bt) + _outer(Bt, At))
         + (8.0 * a / b**3)[..., None, None] * _outer(Bt, Bt))
    return grad, H.sum(axis=1)


def _newton_polish(n, B, t, e):
    """Newton steps on the sphere; ``t`` and ``e`` are flat batches."""
    for _ in range(_NEWTON_STEPS):
        grad, H = _energy_hessian(n, B, t)
        Q = complete_basis(t)
        T = Q[:, :, [0, 2]]  # tangent basis at t
        # the energy is scale invariant, so t^T grad = 0 and the Riemannian
        # Hessian is the tangent projection of H
        Ht = np.einsum("bik,bij,bjl->bkl", T, H, T)
        gt = np.einsum("bik,bi->bk", T, grad)
        vals = np.linalg.eigvalsh(Ht)
        ok = vals[:, 0] > 0
        safe = np.where(ok[:, None, None], Ht, np.eye(2))
        xi = -np.linalg.solve(safe, gt[..., None])[..., 0]
        t_new = normalize(t + np.einsum("bik,bk->bi", T, xi))
        e_new = _energy(n, B, t_new)
        take = ok & np.all(np.isfinite(t_new), axis=1) & (e_new <= e + _ROUNDOFF * np.abs(e))
        t = np.where(take[:, None], t_new, t)
        e = np.where(take, e_new, e)
    return t, e


def scf_iterate(n, B, t, iterations):
    """Run ``iterations`` SCF steps from ``t``; energies never increase.

    Vectorized over leading dimensions. Returns ``(t, energy, t_last)``;
    with the descent safeguard the last iterate is also the best one.
    """
    batch = t.shape[:-1]
    N = n.shape[-2]
    n = n.reshape((-1, N, 3))
    B = B.reshape((-1, N, 3, 3))
    t = t.reshape((-1, 3))
    e = _energy(n, B, t)
    for _ in range(iterations):
        E = _e_matrix(n, B, t)
        vals, vecs = np.linalg.eigh(E)
        v = vecs[:, :, 0]
        v = v * np.where(np.einsum("bi,bi->b", v, t) < 0, -1.0, 1.0)[:, None]
        ev = _energy(n, B, v)
        take = ev <= e
        t_new = np.where(take[:, None], v, t)
        e_new = np.where(take, ev, e)
        retry = np.flatnonzero(~take)
        if retry.size:
            t_r, e_r = _shifted_step(n[retry], B[retry], t[retry], E[retry], vals[retry], e[retry])
            t_new[retry] = t_r
            e_new[retry] = e_r
        t, e = t_new, e_new
    t, e = _newton_polish(n, B, t, e)
    t = t.reshape(batch + (3,))
    e = e.reshape(batch)
    return t, e, t


def scf_from_lattice(n, B, points, iterations):
    energies = lattice_energies(n, B, points)
    start = points[np.argmin(energies, axis=-1)]  # first index wins ties
    return scf_iterate(n, B, start, iterations)


def scf_optimize(correspondences, R, config=None):
    """Translation minimizing the PNEC energy for a fixed rotation."""
    from .solver import SolverConfig

    config = config or SolverConfig()
    R = np.asarray(R, dtype=float)
    n, B = scf_terms(correspondences.f_host, correspondences.f_target,
                     correspondences.cov_target, R, config.regularization)
    t, _, _ = scf_from_lattice(n, B, fibonacci_lattice(config.lattice_points),
                               config.scf_iterations)
    if not np.all(np.isfinite(t)):
        raise FloatingPointError("SCF eigen-solve produced non-finite values")
    return t
