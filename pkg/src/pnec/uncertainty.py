"""Unscented propagation of 2D feature covariances onto the bearing sphere."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAlignmentError, InvalidCovarianceError

DEFAULT_KAPPA = 1.0
# bearings with mu_z at or below this cannot be aligned with +z
ANTIPODE_LIMIT = -1.0 + 1e-6
_PSD_TOL = 1e-12


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray   # (2n+1, n)
    weights: np.ndarray  # (2n+1,)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; ``inverse_camera_matrix`` maps pixels to rays."""

    inverse_camera_matrix: np.ndarray

    @classmethod
    def from_focal(cls, fx, fy, cx, cy):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        return cls(np.linalg.inv(K))

    @property
    def camera_matrix(self):
        return np.linalg.inv(self.inverse_camera_matrix)

    def project(self, x):
        """Pixel coordinates of camera-frame points ``(..., 3)``."""
        h = np.asarray(x, dtype=float) @ self.camera_matrix.T
        return h[..., :2] / h[..., 2:3]

    def unproject(self, pixel):
        pixel = np.asarray(pixel, dtype=float)
        h = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
        return h @ self.inverse_camera_matrix.T


def check_covariance(cov, name="covariance"):
    cov = np.asarray(cov, dtype=float)
    if cov.shape[-1] != cov.shape[-2] or not np.all(np.isfinite(cov)):
        raise InvalidCovarianceError(f"{name} must be a finite square matrix")
    if not np.allclose(cov, np.swapaxes(cov, -1, -2), atol=1e-12, rtol=1e-9):
        raise InvalidCovarianceError(f"{name} is not symmetric")
    scale = max(1.0, float(np.max(np.abs(cov), initial=0.0)))
    if np.any(np.linalg.eigvalsh(cov) < -_PSD_TOL * scale):
        raise InvalidCovarianceError(f"{name} is not positive semidefinite")
    return cov


def psd_cholesky(cov):
    """Lower factor ``C`` with ``C C^T = cov`` that tolerates zero pivots.

    ``np.linalg.cholesky`` rejects semidefinite input such as the rank-1
    covariance ``diag(1, 0)``; here a vanishing pivot just yields a zero
    column.
    """
    cov = check_covariance(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    n = cov.shape[-1]
    L = np.zeros_like(cov)
    scale = max(1.0, float(np.max(np.abs(np.diagonal(cov)))))
    for j in range(n):
        d = cov[j, j] - L[j, :j] @ L[j, :j]
        if d <= _PSD_TOL * scale:
            continue
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (cov[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def _cholesky_2x2(cov):
    """Vectorized PSD-tolerant factor of a stack of 2x2 covariances."""
    a = cov[..., 0, 0]
    b = cov[..., 1, 0]
    c = cov[..., 1, 1]
    l11 = np.sqrt(np.maximum(a, 0.0))
    l21 = np.divide(b, l11, out=np.zeros_like(b), where=l11 > 0)
    l22 = np.sqrt(np.maximum(c - l21 * l21, 0.0))
    L = np.zeros(cov.shape)
    L[..., 0, 0] = l11
    L[..., 1, 0] = l21
    L[..., 1, 1] = l22
    return L


def _check_cov2d_stack(cov):
    cov = np.asarray(cov, dtype=float)
    if cov.shape[-2:] != (2, 2) or not np.all(np.isfinite(cov)):
        raise InvalidCovarianceError("2D covariance must be finite with shape (..., 2, 2)")
    if np.any(np.abs(cov[..., 0, 1] - cov[..., 1, 0]) > 1e-12 * np.maximum(1.0, np.abs(cov[..., 0, 1]))):
        raise InvalidCovarianceError("2D covariance is not symmetric")
    tr = cov[..., 0, 0] + cov[..., 1, 1]
    det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] ** 2
    scale = np.maximum(1.0, np.abs(tr))
    if np.any(cov[..., 0, 0] < -_PSD_TOL * scale) or np.any(cov[..., 1, 1] < -_PSD_TOL * scale) \
            or np.any(det < -_PSD_TOL * scale * scale):
        raise InvalidCovarianceError("2D covariance is not positive semidefinite")
    return cov


def sigma_points(mu, cov, kappa=DEFAULT_KAPPA):
    mu = np.asarray(mu, dtype=float)
    n = mu.shape[0]
    if n + kappa <= 0:
        raise ValueError("n + kappa must be positive")
    C = psd_cholesky(cov)
    spread = np.sqrt(n + kappa) * C.T  # rows are scaled columns of C
    points = np.concatenate([mu[None], mu + spread, mu - spread])
    weights = np.full(2 * n + 1, 0.5 / (n + kappa))
    weights[0] = kappa / (n + kappa)
    return SigmaPointSet(points, weights)


def weighted_moments(points, weights):
    """Weighted mean and scatter of sigma points along axis -2."""
    mean = np.einsum("k,...ki->...i", weights, points)
    d = points - mean[..., None, :]
    scatter = np.einsum("k,...ki,...kj->...ij", weights, d, d)
    return mean, scatter


def omni_alignment_rotation(mu):
    """Rotation taking the unit bearing ``mu`` onto the +z axis.

    Its first two rows span the tangent plane at ``mu``, so
    ``R.T @ (c, 0)`` lifts a tangent-plane offset into 3D.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(mu[..., 2] <= ANTIPODE_LIMIT):
        raise DegenerateAlignmentError("bearing too close to (0, 0, -1)")
    m1, m2, m3 = mu[..., 0], mu[..., 1], mu[..., 2]
    d = 1.0 + m3
    R = np.empty(mu.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - m1 * m1 / d
    R[..., 0, 1] = -m1 * m2 / d
    R[..., 0, 2] = -m1
    R[..., 1, 0] = -m1 * m2 / d
    R[..., 1, 1] = 1.0 - m2 * m2 / d
    R[..., 1, 2] = -m2
    R[..., 2, 0] = m1
    R[..., 2, 1] = m2
    R[..., 2, 2] = m3
    return R


def _sigma_offsets_2d(cov2d, kappa):
    """(..., 4, 2) offsets +-sqrt(2 + kappa) C_i and the 5 weights."""
    C = _cholesky_2x2(cov2d)
    cols = np.sqrt(2.0 + kappa) * np.swapaxes(C, -1, -2)
    offsets = np.concatenate([cols, -cols], axis=-2)
    weights = np.full(5, 0.5 / (2.0 + kappa))
    weights[0] = kappa / (2.0 + kappa)
    return offsets, weights


def unscented_pinhole(pixel, cov, intrinsics, kappa=DEFAULT_KAPPA):
    """Bearing mean and 3x3 covariance of a pixel observed through a pinhole.

    Vectorized over leading dimensions of ``pixel`` (..., 2) and
    ``cov`` (..., 2, 2). The returned mean is renormalized to unit length;
    the covariance is the raw sigma-point scatter about the unnormalized
    mean.
    """
    pixel = np.asarray(pixel, dtype=float)
    cov = _check_cov2d_stack(cov)
    offsets, weights = _sigma_offsets_2d(cov, kappa)
    xi = np.concatenate([pixel[..., None, :], pixel[..., None, :] + offsets], axis=-2)
    rays = intrinsics.unproject(xi)
    zeta = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    mean, scatter = weighted_moments(zeta, weights)
    bearing = mean / np.linalg.norm(mean, axis=-1, keepdims=True)
    return bearing, scatter


def unscented_omni(mu, cov2d, kappa=DEFAULT_KAPPA):
    """3x3 covariance of a bearing whose tangent-plane covariance is ``cov2d``."""
    mu = np.asarray(mu, dtype=float)
    cov2d = _check_cov2d_stack(cov2d)
    R = omni_alignment_rotation(mu)
    offsets, weights = _sigma_offsets_2d(cov2d, kappa)
    # R^T (c, 0) == c1 * R[0] + c2 * R[1]
    lifted = np.einsum("...kj,...ji->...ki", offsets, R[..., :2, :])
    xi = np.concatenate([mu[..., None, :], mu[..., None, :] + lifted], axis=-2)
    zeta = xi / np.linalg.norm(xi, axis=-1, keepdims=True)
    _, scatter = weighted_moments(zeta, weights)
    return scatter
