"""PNEC two-stage estimator and the NEC baseline.

The ``*_batch`` functions operate on stacked problems with identical
correspondence counts (``f`` of shape ``(B, N, 3)``); per-problem entry
points are thin wrappers with ``B = 1``, so both paths share one
implementation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..energy import (DEFAULT_REGULARIZATION, CorrespondenceSet, nec_energy,
                      pnec_energy, residual_variances)
from ..errors import DegenerateConfigurationError
from ..geometry import is_rotation, normalize
from .lattice import fibonacci_lattice
from .refinement import joint_refinement_batch
from .rotation import LMSchedule, rotation_objective, rotation_step_batch
from .scf import scf_from_lattice, scf_iterate, scf_terms


@dataclass
class SolverConfig:
    outer_iterations: int = 10
    scf_iterations: int = 10
    lattice_points: int = 500
    regularization: float = DEFAULT_REGULARIZATION
    lm_max_iters: int = 50
    lm_tolerance: float = 1e-10
    lm_initial_damping: float = 1e-6
    kappa: float = 1.0
    # sample the lattice in every outer iteration, or only in the first
    resample_lattice: bool = True
    reweight: bool = True
    joint_refinement: bool = True

    def __post_init__(self):
        if self.outer_iterations < 1 or self.scf_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.lattice_points < 2:
            raise ValueError("lattice needs at least 2 points")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        if self.lm_max_iters < 1 or not self.lm_tolerance > 0 or not self.lm_initial_damping > 0:
            raise ValueError("LM settings must be positive")

    @property
    def schedule(self):
        return LMSchedule(initial_damping=self.lm_initial_damping,
                          max_iterations=self.lm_max_iters, tolerance=self.lm_tolerance)


@dataclass(frozen=True)
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not is_rotation(self.rotation, atol=1e-8):
            raise ValueError("rotation is not in SO(3)")
        if abs(np.linalg.norm(self.translation) - 1.0) > 1e-9:
            raise ValueError("translation must be a unit vector")


@dataclass
class EstimateReport:
    pose: RelativePose
    final_energy: float
    energy_trace: dict = field(default_factory=dict)
    iterations_used: dict = field(default_factory=dict)
    wall_time: float = 0.0
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "rotation": self.pose.rotation.tolist(),
            "translation": self.pose.translation.tolist(),
            "final_energy": self.final_energy,
            "energy_trace": {k: [float(x) for x in v] for k, v in self.energy_trace.items()},
            "iterations_used": {k: int(v) for k, v in self.iterations_used.items()},
            "wall_time": self.wall_time,
            "flags": list(self.flags),
        }


def resolve_translation_sign(f, fp, R, t):
    """Flip ``t`` where the median triangulated host depth is negative.

    Depths come from least squares on ``lambda f = lambda' R f' + t``.
    """
    g = np.einsum("...ij,...nj->...ni", R, fp)
    fg = np.einsum("...ni,...ni->...n", f, g)
    ft = np.einsum("...ni,...i->...n", f, t)
    gt = np.einsum("...ni,...i->...n", g, t)
    denom = 1.0 - fg * fg
    depth = np.divide(ft - fg * gt, denom, out=np.zeros_like(denom), where=denom > 1e-12)
    sign = np.where(np.median(depth, axis=-1) < 0, -1.0, 1.0)
    return t * sign[..., None]


def _check_problem(correspondences):
    f = correspondences.f_host
    for v in (f, correspondences.f_target):
        if np.all(np.linalg.norm(np.cross(v, v[0]), axis=1) < 1e-12):
            raise DegenerateConfigurationError("all bearings are parallel")


def _batch_defaults(B, R_init, t_init):
    R0 = np.broadcast_to(np.eye(3) if R_init is None else np.asarray(R_init, float), (B, 3, 3)).copy()
    t0 = np.broadcast_to((0.0, 0.0, 1.0) if t_init is None else np.asarray(t_init, float), (B, 3))
    return R0, normalize(t0.copy())


def nec_estimate_batch(f, fp, config, R_init=None):
    """Rotation by LM on ``lambda_min(M(R))``, translation by eigenvector."""
    B = f.shape[0]
    R0, _ = _batch_defaults(B, R_init, None)
    ones = np.ones(f.shape[:-1])
    R, lam, its, stalled = rotation_step_batch(f, fp, ones, R0, config.schedule)
    _, t = rotation_objective(f, fp, ones, R)
    t = resolve_translation_sign(f, fp, R, t)
    return {
        "R": R, "t": t, "energy": nec_energy(f, fp, R, t),
        "rotation_iterations": its, "stalled": stalled,
    }


def pnec_estimate_batch(f, fp, cov, config, R_init=None, t_init=None):
    """Alternating reweighted rotation / SCF translation, then joint refinement."""
    B, N = f.shape[:2]
    c = config.regularization
    schedule = config.schedule
    R, t = _batch_defaults(B, R_init, t_init)
    points = fibonacci_lattice(config.lattice_points)
    weights = np.ones((B, N))
    S = config.outer_iterations
    lam_trace = np.empty((B, S))
    stage1_trace = np.empty((B, S))
    rot_its = np.zeros(B, dtype=int)
    stalled = np.zeros(B, dtype=bool)
    for s in range(S):
        R, lam, its, st = rotation_step_batch(f, fp, weights, R, schedule)
        rot_its += its
        stalled |= st
        n, Bm = scf_terms(f, fp, cov, R, c)
        if s == 0 or config.resample_lattice:
            t, energy, _ = scf_from_lattice(n, Bm, points, config.scf_iterations)
        else:
            t, energy, _ = scf_iterate(n, Bm, t, config.scf_iterations)
        if config.reweight:
            weights = np.sqrt(residual_variances(f, cov, R, t, c))
        lam_trace[:, s] = lam
        stage1_trace[:, s] = energy
    stage1_energy = pnec_energy(f, fp, cov, R, t, c)
    out = {
        "lambda_trace": lam_trace, "stage1_trace": stage1_trace,
        "stage1_energy": stage1_energy, "rotation_iterations": rot_its, "stalled": stalled,
    }
    if config.joint_refinement:
        R, t, energy, its, accepted, trace = joint_refinement_batch(f, fp, cov, R, t, c, schedule)
        out.update(refine_iterations=its, refine_accepted=accepted, refine_trace=trace)
    else:
        energy = stage1_energy
    t = resolve_translation_sign(f, fp, R, t)
    out.update(R=R, t=t, energy=energy)
    return out


def _stack(correspondences):
    return (correspondences.f_host[None], correspondences.f_target[None],
            correspondences.cov_target[None])


def pnec_estimate(correspondences: CorrespondenceSet, config=None, R_init=None, t_init=None):
    config = config or SolverConfig()
    _check_problem(correspondences)
    start = time.perf_counter()
    f, fp, cov = _stack(correspondences)
    out = pnec_estimate_batch(f, fp, cov, config, R_init, t_init)
    wall = time.perf_counter() - start
    trace = {
        "rotation_lambda": out["lambda_trace"][0],
        "translation_energy": out["stage1_trace"][0],
    }
    iterations = {"outer": config.outer_iterations,
                  "rotation_lm": int(out["rotation_iterations"][0])}
    flags = ["rotation_lm_stalled"] if out["stalled"][0] else []
    if config.joint_refinement:
        rt = out["refine_trace"][0]
        trace["refinement"] = rt[np.isfinite(rt)]
        iterations["refinement_lm"] = int(out["refine_iterations"][0])
        iterations["refinement_accepted"] = int(out["refine_accepted"][0])
        if out["refine_accepted"][0] == 0:
            flags.append("refinement_no_progress")
    return EstimateReport(RelativePose(out["R"][0], out["t"][0]), float(out["energy"][0]),
                          trace, iterations, wall, flags)


def nec_estimate(correspondences: CorrespondenceSet, config=None, R_init=None):
    config = config or SolverConfig()
    _check_problem(correspondences)
    start = time.perf_counter()
    f, fp, _ = _stack(correspondences)
    out = nec_estimate_batch(f, fp, config, R_init)
    wall = time.perf_counter() - start
    flags = ["rotation_lm_stalled"] if out["stalled"][0] else []
    return EstimateReport(RelativePose(out["R"][0], out["t"][0]), float(out["energy"][0]),
                          {"rotation_lambda": [float(out["energy"][0])]},
                          {"rotation_lm": int(out["rotation_iterations"][0])}, wall, flags)


def joint_refinement(correspondences: CorrespondenceSet, config, pose_init: RelativePose):
    """Refine a pose on the PNEC energy; returns ``(pose, accepted_steps)``."""
    config = config or SolverConfig()
    if not config.regularization > 0:
        raise ValueError("joint refinement needs c > 0")
    f, fp, cov = _stack(correspondences)
    R, t, energy, its, accepted, _ = joint_refinement_batch(
        f, fp, cov, pose_init.rotation[None], pose_init.translation[None],
        config.regularization, config.schedule)
    if accepted[0] == 0:
        return pose_init, 0
    return RelativePose(R[0], normalize(t[0])), int(accepted[0])


