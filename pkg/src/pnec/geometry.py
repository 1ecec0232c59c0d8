"""Rotation and direction parameterizations.

Every function accepts a single value or a stack with leading batch
dimensions, e.g. ``skew`` maps ``(..., 3)`` to ``(..., 3, 3)``.

Cayley convention: ``R = (I + [u]x)(I - [u]x)^-1``, which rotates about
``u / |u|`` by ``2 * arctan(|u|)``.
"""
from __future__ import annotations

import numpy as np


def cross(a, b):
    """Broadcasting cross product along the last axis.

    Same values as ``np.cross``, with far less per-call overhead on the
    small stacks the solvers work with.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def skew(u):
    """Cross-product matrix: ``skew(u) @ v == np.cross(u, v)``."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape[:-1] + (3, 3))
    out[..., 0, 1] = -u[..., 2]
    out[..., 0, 2] = u[..., 1]
    out[..., 1, 0] = u[..., 2]
    out[..., 1, 2] = -u[..., 0]
    out[..., 2, 0] = -u[..., 1]
    out[..., 2, 1] = u[..., 0]
    return out


def cayley_to_rotation(u):
    u = np.asarray(u, dtype=float)
    uu = np.sum(u * u, axis=-1)[..., None, None]
    outer = u[..., :, None] * u[..., None, :]
    eye = np.broadcast_to(np.eye(3), outer.shape)
    return ((1.0 - uu) * eye + 2.0 * outer + 2.0 * skew(u)) / (1.0 + uu)


def rotation_to_cayley(R):
    """Inverse Cayley map, defined for rotation angles below pi."""
    R = np.asarray(R, dtype=float)
    # [u]x = (R - I)(R + I)^-1, read off the skew part
    eye = np.broadcast_to(np.eye(3), R.shape)
    S = np.linalg.solve(np.swapaxes(R + eye, -1, -2), np.swapaxes(R - eye, -1, -2))
    S = np.swapaxes(S, -1, -2)
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def axis_angle_to_rotation(axis, angle):
    """Rodrigues' formula. ``axis`` need not be normalized; zero axis gives I."""
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    k = np.divide(axis, norm, out=np.zeros_like(axis), where=norm > 0)
    K = skew(k)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def rotation_vector_to_rotation(w):
    w = np.asarray(w, dtype=float)
    return axis_angle_to_rotation(w, np.linalg.norm(w, axis=-1))


def rotation_angle(R):
    """Angle of a rotation matrix in radians, in [0, pi].

    Same angle as ``arccos((tr R - 1) / 2)``, but taken with ``atan2`` of
    the skew part so small angles keep full precision instead of ~1e-8.
    """
    R = np.asarray(R, dtype=float)
    cos = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    w = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    return np.arctan2(0.5 * np.linalg.norm(w, axis=-1), cos)


def spherical_to_unit(theta, phi):
    """``(sin t sin p, -sin t cos p, cos t)``."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), -st * np.cos(phi), np.cos(theta)], axis=-1)


def spherical_jacobian(theta, phi):
    """Derivatives of ``spherical_to_unit`` w.r.t. (theta, phi), shape (..., 3, 2)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    d_theta = np.stack([ct * sp, -ct * cp, -st], axis=-1)
    d_phi = np.stack([st * cp, st * sp, np.zeros_like(st)], axis=-1)
    return np.stack([d_theta, d_phi], axis=-1)


def unit_to_spherical(v):
    """Inverse of ``spherical_to_unit``; phi in [0, 2 pi), and 0 at the poles."""
    v = np.asarray(v, dtype=float)
    theta = np.arccos(np.clip(v[..., 2], -1.0, 1.0))
    rho = np.hypot(v[..., 0], v[..., 1])
    phi = np.mod(np.arctan2(v[..., 0], -v[..., 1]), 2.0 * np.pi)
    phi = np.where(rho > 0.0, phi, 0.0)
    return theta, phi


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def is_rotation(R, atol=1e-10):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3) or not np.all(np.isfinite(R)):
        return False
    eye = np.eye(3)
    orth = np.allclose(R @ np.swapaxes(R, -1, -2), eye, atol=atol, rtol=0)
    return bool(orth and np.allclose(np.linalg.det(R), 1.0, atol=atol, rtol=0))


def complete_basis(v):
    """Rotation whose second column is ``-v``, i.e. ``Q @ (0, -1, 0) == v``.

    Used to place a unit vector on the equator point (theta=pi/2, phi=0)
    of a local spherical chart.
    """
    v = np.asarray(v, dtype=float)
    # helper axis least aligned with v
    idx = np.argmin(np.abs(v), axis=-1)
    helper = np.zeros(v.shape)
    np.put_along_axis(helper, idx[..., None], 1.0, axis=-1)
    a = normalize(np.cross(helper, v))
    b = np.cross(v, a)
    # columns (a, -v, b): right-handed since a x (-v) = b
    return np.stack([a, -v, b], axis=-1)
