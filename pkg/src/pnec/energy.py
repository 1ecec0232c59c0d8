"""NEC and PNEC residuals, energies and Gramian matrices.

Conventions: a target-frame point maps to the host frame as
``x = R x' + t``; the epipolar plane normal of correspondence ``i`` is
``n_i = f_i x R f'_i``. Array arguments broadcast over leading batch
dimensions: bearings are ``(..., N, 3)``, covariances ``(..., N, 3, 3)``,
rotations ``(..., 3, 3)`` and translations ``(..., 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateConfigurationError, InvalidWeightError,
                     SingularityError, UndefinedLimitError)
from .geometry import cross, skew
from .uncertainty import check_covariance

DEFAULT_REGULARIZATION = 1e-10
MIN_CORRESPONDENCES = 5
# only unregularized (c == 0) evaluations can fall below this
_VARIANCE_FLOOR = 1e-300


@dataclass(frozen=True)
class BearingPair:
    f_host: np.ndarray
    f_target: np.ndarray
    cov_target: np.ndarray


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Bearing correspondences with target-side covariances.

    ``f_host`` and ``f_target`` are ``(N, 3)`` unit vectors and
    ``cov_target`` is ``(N, 3, 3)``.
    """

    f_host: np.ndarray
    f_target: np.ndarray
    cov_target: np.ndarray

    def __post_init__(self):
        f = np.array(self.f_host, dtype=float)
        fp = np.array(self.f_target, dtype=float)
        cov = np.array(self.cov_target, dtype=float)
        n = f.shape[0] if f.ndim == 2 else -1
        if f.shape != (n, 3) or fp.shape != (n, 3) or cov.shape != (n, 3, 3):
            raise ValueError("expected shapes (N, 3), (N, 3), (N, 3, 3)")
        if n < MIN_CORRESPONDENCES:
            raise DegenerateConfigurationError(
                f"need at least {MIN_CORRESPONDENCES} correspondences, got {n}")
        for name, v in (("f_host", f), ("f_target", fp)):
            if not np.all(np.isfinite(v)) or np.any(np.abs(np.linalg.norm(v, axis=1) - 1.0) > 1e-9):
                raise ValueError(f"{name} must contain unit vectors")
        check_covariance(cov, "cov_target")
        for arr in (f, fp, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "f_host", f)
        object.__setattr__(self, "f_target", fp)
        object.__setattr__(self, "cov_target", cov)

    def __len__(self):
        return self.f_host.shape[0]

    def __getitem__(self, i):
        return BearingPair(self.f_host[i], self.f_target[i], self.cov_target[i])

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        return cls(np.array([p.f_host for p in pairs]),
                   np.array([p.f_target for p in pairs]),
                   np.array([p.cov_target for p in pairs]))

    def with_covariances(self, cov):
        return CorrespondenceSet(self.f_host, self.f_target, cov)


def rotate_targets(fp, R):
    """``R f'_i`` for every correspondence."""
    return np.einsum("...ij,...nj->...ni", R, fp)


def epipolar_normals(f, fp, R):
    return cross(f, rotate_targets(fp, R))


def epipolar_normal(pair, R):
    return cross(pair.f_host, np.asarray(R) @ pair.f_target)


def nec_residual(t, n):
    return np.abs(np.einsum("...i,...i->...", t, n))


def nec_residuals(f, fp, R, t):
    n = epipolar_normals(f, fp, R)
    return np.abs(np.einsum("...ni,...i->...n", n, t))


def nec_energy(f, fp, R, t):
    return np.sum(nec_residuals(f, fp, R, t) ** 2, axis=-1)


def gram_matrix(f, fp, R):
    n = epipolar_normals(f, fp, R)
    return np.einsum("...ni,...nj->...ij", n, n)


def weighted_gram(f, fp, R, weights):
    """Gramian with residual ``i`` scaled by ``1 / weights[i]**2``."""
    weights = np.asarray(weights, dtype=float)
    if np.any(~(weights > 0)):
        raise InvalidWeightError("weights must be positive")
    n = epipolar_normals(f, fp, R) / weights[..., None]
    return np.einsum("...ni,...nj->...ij", n, n)


def rotated_covariances(cov, R):
    """``R Sigma_i R^T``."""
    return np.einsum("...ij,...njk,...lk->...nil", R, cov, R)


def normal_covariances(f, cov, R):
    """Covariance of each epipolar normal: ``[f]x R Sigma R^T [f]x^T``."""
    S = skew(f)
    return S @ rotated_covariances(cov, R) @ np.swapaxes(S, -1, -2)


def residual_variances(f, cov, R, t, c=DEFAULT_REGULARIZATION):
    """Regularized variance ``t^T Sigma_n t + c`` of each NEC residual."""
    u = cross(np.asarray(t)[..., None, :], f)  # [f]x^T t == t x f
    P = rotated_covariances(cov, R)
    return np.einsum("...ni,...nij,...nj->...n", u, P, u) + c


def residual_variance(pair, R, t, c=DEFAULT_REGULARIZATION):
    return float(residual_variances(pair.f_host[None], pair.cov_target[None], R, t, c)[0])


def pnec_residuals(f, fp, cov, R, t, c=DEFAULT_REGULARIZATION):
    """Signed whitened residuals ``t^T n_i / sigma'_i``."""
    n = epipolar_normals(f, fp, R)
    e = np.einsum("...ni,...i->...n", n, t)
    var = residual_variances(f, cov, R, t, c)
    if np.any(var < _VARIANCE_FLOOR):
        raise SingularityError("vanishing residual variance; use c > 0")
    return e / np.sqrt(var)


def pnec_energy(f, fp, cov, R, t, c=DEFAULT_REGULARIZATION):
    n = epipolar_normals(f, fp, R)
    e = np.einsum("...ni,...i->...n", n, t)
    var = residual_variances(f, cov, R, t, c)
    if np.any(var < _VARIANCE_FLOOR):
        raise SingularityError("vanishing residual variance; use c > 0")
    return np.sum(e * e / var, axis=-1)


def directional_limit(k, pair, R):
    """Limit of the unregularized weighted residual as t approaches f.

    ``k`` is the unit axis of ``t x f`` along the approach path; it must be
    orthogonal to ``f``.
    """
    k = np.asarray(k, dtype=float)
    R = np.asarray(R, dtype=float)
    if abs(np.linalg.norm(k) - 1.0) > 1e-9 or abs(k @ pair.f_host) > 1e-9:
        raise ValueError("k must be a unit vector orthogonal to f")
    rk = R.T @ k
    denom = rk @ pair.cov_target @ rk
    if not denom > 0:
        raise UndefinedLimitError("k^T R Sigma R^T k must be positive")
    return float((rk @ pair.f_target) ** 2 / denom)


def mahalanobis_plane_distance_sq(n, cov_n, t):
    """Squared Mahalanobis distance of ``n`` to the plane through 0 with normal ``t``.

    Whitening construction: with ``cov_n = Q^T V Q``, the plane
    ``(t, 0)`` maps to ``q = (V^1/2 Q t, -n^T t)`` and the distance of the
    origin to it is ``q_4 / |q_123|``.
    """
    vals, vecs = np.linalg.eigh(cov_n)
    Q = vecs.T
    q123 = np.sqrt(np.clip(vals, 0.0, None)) * (Q @ t)
    q4 = -(n @ t)
    return float(q4 * q4 / (q123 @ q123))
