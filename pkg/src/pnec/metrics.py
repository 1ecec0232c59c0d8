"""Angular error metrics in degrees."""
from __future__ import annotations

import numpy as np

from .geometry import rotation_angle


def rotation_error(R_true, R_est):
    """Angle of ``R_true^T R_est`` in degrees; broadcasts over stacks."""
    R_true = np.asarray(R_true, dtype=float)
    R_est = np.asarray(R_est, dtype=float)
    return np.degrees(rotation_angle(np.swapaxes(R_true, -1, -2) @ R_est))


def translation_error(t_true, t_est):
    """``arccos(t_true . t_est)`` in degrees. The sign of ``t_est`` is not folded."""
    a = np.asarray(t_true, float)
    b = np.asarray(t_est, float)
    d = np.einsum("...i,...i->...", a, b)
    # atan2 form of the arccos: exact near 0 and 180 degrees
    return np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), d))


def _check_trajectories(traj_true, traj_est):
    a = np.asarray(traj_true, dtype=float)
    b = np.asarray(traj_est, dtype=float)
    if a.ndim != 3 or a.shape[1:] != (3, 3) or a.shape != b.shape or len(a) == 0:
        raise ValueError("trajectories must be equal-length, nonempty stacks of 3x3 rotations")
    return a, b


def rpe(traj_true, traj_est, delta):
    """Rotation-only relative pose error: RMSE over the ``n - delta`` step pairs."""
    a, b = _check_trajectories(traj_true, traj_est)
    n = len(a)
    if not 1 <= delta < n:
        raise ValueError(f"delta must lie in [1, {n - 1}]")
    rel_true = np.swapaxes(a[:-delta], -1, -2) @ a[delta:]
    rel_est = np.swapaxes(b[:-delta], -1, -2) @ b[delta:]
    e = rotation_angle(np.swapaxes(rel_true, -1, -2) @ rel_est)
    return float(np.degrees(np.sqrt(np.mean(e * e))))


def rpe1(traj_true, traj_est):
    return rpe(traj_true, traj_est, 1)


def rpen(traj_true, traj_est):
    """Mean of ``rpe`` over every step ``1 <= delta <= n - 1``."""
    n = len(traj_true)
    return float(np.mean([rpe(traj_true, traj_est, d) for d in range(1, n)]))
