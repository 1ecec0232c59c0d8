"""Seeded synthetic two-frame problems and the Monte Carlo experiment runner.

Random streams: every instance owns a Philox generator keyed by a 64-bit
seed. ``run_experiment`` derives that seed from
``(master_seed, cell, trial)`` through ``numpy.random.SeedSequence``, so a
trial's data never depends on execution order or worker count.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .energy import CorrespondenceSet, pnec_energy
from .geometry import axis_angle_to_rotation, normalize
from .metrics import rotation_error, translation_error
from .optimizer.solver import (RelativePose, SolverConfig, nec_estimate_batch,
                               pnec_estimate_batch)
from .uncertainty import (CameraIntrinsics, omni_alignment_rotation, unscented_omni,
                          unscented_pinhole)

log = logging.getLogger(__name__)

NOISE_TYPES = ("iso-homo", "iso-inhomo", "aniso-homo", "aniso-inhomo")
CAMERAS = ("omni", "pinhole")
ESTIMATORS = ("nec", "pnec")
# sampled omni target bearings must stay clear of the alignment antipode
_OMNI_Z_LIMIT = -1.0 + 1e-3
_MAX_RESAMPLES = 100
CHUNK_SIZE = 100


@dataclass(frozen=True)
class NoiseSpec:
    noise_type: str = "aniso-inhomo"
    level: float = 1.0
    s_range: tuple = (0.5, 1.5)
    beta_range: tuple = (0.5, 1.0)
    alpha_range: tuple = (0.0, np.pi)

    def __post_init__(self):
        if self.noise_type not in NOISE_TYPES:
            raise ValueError(f"unknown noise type {self.noise_type!r}")
        if not self.level > 0:
            raise ValueError("noise level must be > 0")
        for lo, hi in (self.s_range, self.beta_range, self.alpha_range):
            if not lo <= hi:
                raise ValueError("parameter ranges must satisfy lo <= hi")
        if self.s_range[0] < 0 or not 0 <= self.beta_range[0] <= self.beta_range[1] <= 1:
            raise ValueError("s must be >= 0 and beta within [0, 1]")


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 10
    translation_enabled: bool = True
    depth_range: tuple = (4.0, 8.0)
    lateral_range: tuple = (-2.0, 2.0)
    # pinhole points: uniform directions within this cone about the optical
    # axis; None samples the lateral box instead
    pinhole_cone_deg: float | None = 60.0
    max_rotation: float = 0.5
    max_translation: float = 2.0
    focal_px: float = 800.0
    image_size: tuple = (752, 480)

    def __post_init__(self):
        if self.n_points < 5:
            raise ValueError("n_points must be >= 5")
        if not (0 < self.depth_range[0] <= self.depth_range[1]):
            raise ValueError("depth range must be positive")
        if not self.lateral_range[0] < self.lateral_range[1]:
            raise ValueError("lateral range must be nonempty")
        if self.pinhole_cone_deg is not None and not 0 < self.pinhole_cone_deg < 90:
            raise ValueError("pinhole cone half-angle must lie in (0, 90) degrees")
        if self.max_rotation < 0 or self.max_translation < 0 or not self.focal_px > 0:
            raise ValueError("magnitudes must be nonnegative and focal positive")

    def intrinsics(self):
        w, h = self.image_size
        return CameraIntrinsics.from_focal(self.focal_px, self.focal_px, 0.5 * w, 0.5 * h)


@dataclass(frozen=True)
class ExperimentParams:
    """Quantities drawn once per experiment (aniso-homo shares one beta)."""

    beta: float | None = None


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    correspondences: CorrespondenceSet
    truth: RelativePose
    cov2d: np.ndarray            # (N, 2, 2) generating covariances, unscaled
    noise_params: np.ndarray     # (N, 3) columns s, beta, alpha
    observations: np.ndarray     # noisy pixels (N, 2) or noisy bearings (N, 3)
    camera: str
    scene: SceneConfig
    noise: NoiseSpec
    seed: int


def make_rng(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def covariance_from_parameters(s, beta, alpha):
    """``s R_a diag(beta, 1 - beta) R_a^T`` for stacked parameters."""
    s, beta, alpha = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (s, beta, alpha)))
    c, sn = np.cos(alpha), np.sin(alpha)
    a, b = s * beta, s * (1.0 - beta)
    out = np.empty(s.shape + (2, 2))
    out[..., 0, 0] = a * c * c + b * sn * sn
    out[..., 1, 1] = a * sn * sn + b * c * c
    out[..., 0, 1] = out[..., 1, 0] = (a - b) * c * sn
    return out


def covariance_sqrt(s, beta, alpha):
    """A square root ``L`` with ``L L^T = covariance_from_parameters(...)``."""
    s, beta, alpha = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (s, beta, alpha)))
    c, sn = np.cos(alpha), np.sin(alpha)
    ra, rb = np.sqrt(s * beta), np.sqrt(s * (1.0 - beta))
    out = np.empty(s.shape + (2, 2))
    out[..., 0, 0] = c * ra
    out[..., 0, 1] = -sn * rb
    out[..., 1, 0] = sn * ra
    out[..., 1, 1] = c * rb
    return out


def experiment_params(spec, rng):
    if spec.noise_type == "aniso-homo":
        return ExperimentParams(beta=float(rng.uniform(*spec.beta_range)))
    return ExperimentParams()


def sample_noise_parameters(spec, rng, params=None, size=1):
    """Per-feature ``(s, beta, alpha)`` arrays of length ``size``."""
    kind = spec.noise_type
    ones = np.ones(size)
    if kind == "iso-homo":
        return ones, 0.5 * ones, 0.0 * ones
    if kind == "iso-inhomo":
        return rng.uniform(*spec.s_range, size), 0.5 * ones, 0.0 * ones
    if kind == "aniso-homo":
        params = params if params is not None and params.beta is not None else experiment_params(spec, rng)
        return ones, params.beta * ones, rng.uniform(*spec.alpha_range, size)
    s = rng.uniform(*spec.s_range, size)
    beta = rng.uniform(*spec.beta_range, size)
    alpha = rng.uniform(*spec.alpha_range, size)
    return s, beta, alpha


def sample_covariance(spec, rng, params=None):
    s, beta, alpha = sample_noise_parameters(spec, rng, params, 1)
    return covariance_from_parameters(s, beta, alpha)[0]


def _random_rotation(rng, max_angle):
    axis = normalize(rng.standard_normal(3))
    return axis_angle_to_rotation(axis, rng.uniform(0.0, max_angle))


def _random_translation(rng, scene):
    if not scene.translation_enabled:
        return np.zeros(3)
    return normalize(rng.standard_normal(3)) * rng.uniform(0.0, scene.max_translation)


def _sample_point(rng, scene, camera):
    depth = rng.uniform(*scene.depth_range)
    if camera == "omni":
        return normalize(rng.standard_normal(3)) * depth
    if scene.pinhole_cone_deg is None:
        x, y = rng.uniform(*scene.lateral_range, 2)
        return np.array([x, y, depth])
    # uniform on the spherical cap: cos of the polar angle is uniform
    cz = rng.uniform(np.cos(np.radians(scene.pinhole_cone_deg)), 1.0)
    az = rng.uniform(0.0, 2.0 * np.pi)
    sz = np.sqrt(1.0 - cz * cz)
    return np.array([sz * np.cos(az), sz * np.sin(az), cz]) * depth


def _sample_points(rng, scene, camera, R, t):
    """Host-frame points whose target-frame view is valid for the camera."""
    pts = []
    for _ in range(scene.n_points):
        for _ in range(_MAX_RESAMPLES):
            x = _sample_point(rng, scene, camera)
            xp = R.T @ (x - t)
            if camera == "pinhole" and xp[2] > 1e-6:
                break
            if camera == "omni" and np.linalg.norm(xp) > 1e-6 and xp[2] / np.linalg.norm(xp) > _OMNI_Z_LIMIT:
                break
        else:
            raise RuntimeError("could not sample a visible point after 100 retries")
        pts.append(x)
    return np.array(pts)


def _bearings_from_observations(camera, obs, scene):
    if camera == "pinhole":
        return normalize(scene.intrinsics().unproject(obs))
    return obs


def _attached_covariances(camera, obs, cov_noise, scene, kappa):
    """Bearing covariances for noisy observations and scaled 2D covariances."""
    if camera == "pinhole":
        _, cov = unscented_pinhole(obs, cov_noise, scene.intrinsics(), kappa)
    else:
        cov = unscented_omni(obs, cov_noise / scene.focal_px**2, kappa)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def generate_instance(scene=None, spec=None, camera="omni", seed=0, params=None, kappa=1.0):
    """Draw one synthetic problem.

    Target observations receive Gaussian noise with covariance
    ``(2 level)^2 Sigma_2D``: in pixels for the pinhole camera, or in the
    tangent plane at the true bearing scaled by ``1 / focal_px`` for the
    omnidirectional camera. Host bearings are exact.
    """
    scene = scene or SceneConfig()
    spec = spec or NoiseSpec()
    if camera not in CAMERAS:
        raise ValueError(f"unknown camera {camera!r}")
    rng = make_rng(seed)
    R = _random_rotation(rng, scene.max_rotation)
    t = _random_translation(rng, scene)
    X = _sample_points(rng, scene, camera, R, t)
    Xp = (X - t) @ R  # rows are R^T (x - t)
    f = normalize(X)
    s, beta, alpha = sample_noise_parameters(spec, rng, params, scene.n_points)
    sigma = 2.0 * spec.level
    z = rng.standard_normal((scene.n_points, 2))
    delta = sigma * np.einsum("nij,nj->ni", covariance_sqrt(s, beta, alpha), z)
    if camera == "pinhole":
        obs = scene.intrinsics().project(Xp) + delta
    else:
        b = normalize(Xp)
        basis = omni_alignment_rotation(b)[:, :2, :]
        obs = normalize(b + np.einsum("nk,nki->ni", delta, basis) / scene.focal_px)
    cov2d = covariance_from_parameters(s, beta, alpha)
    fp = _bearings_from_observations(camera, obs, scene)
    cov3d = _attached_covariances(camera, obs, sigma**2 * cov2d, scene, kappa)
    t_unit = normalize(t) if scene.translation_enabled and np.linalg.norm(t) > 0 else np.array([0.0, 0.0, 1.0])
    return ProblemInstance(
        CorrespondenceSet(f, fp, cov3d), RelativePose(R, t_unit), cov2d,
        np.stack([s, beta, alpha], axis=1), obs, camera, scene, spec, int(seed))


def offset_covariances(instance, offset_fraction, rng, kappa=1.0):
    """Rebuild the attached covariances from perturbed noise parameters.

    Each of ``s``, ``beta``, ``alpha`` moves by a uniform offset of up to
    ``offset_fraction`` times its range width and is clamped back into the
    range. The noisy observations are kept.
    """
    if not 0.0 <= offset_fraction <= 1.0:
        raise ValueError("offset_fraction must lie in [0, 1]")
    spec = instance.noise
    if offset_fraction == 0.0:
        return instance
    params = instance.noise_params.copy()
    for j, (lo, hi) in enumerate((spec.s_range, spec.beta_range, spec.alpha_range)):
        width = hi - lo
        params[:, j] = np.clip(
            params[:, j] + rng.uniform(-1.0, 1.0, len(params)) * offset_fraction * width, lo, hi)
    cov2d = covariance_from_parameters(*params.T)
    sigma = 2.0 * spec.level
    cov3d = _attached_covariances(instance.camera, instance.observations, sigma**2 * cov2d,
                                  instance.scene, kappa)
    return replace(instance, correspondences=instance.correspondences.with_covariances(cov3d),
                   cov2d=cov2d, noise_params=params)


# --- experiment runner -----------------------------------------------------

@dataclass(frozen=True)
class Cell:
    """One grid cell: every trial of a cell shares its scene and noise spec."""

    camera: str = "omni"
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    scene: SceneConfig = field(default_factory=SceneConfig)
    offset_fraction: float = 0.0
    # estimators start from the true rotation turned by this angle (rad)
    # about a random axis; None starts from the identity
    init_perturbation: float | None = 0.05

    def key(self):
        """Identity of the generated data; offset and init are left out so
        that sweeps over them reuse the same problems."""
        return json.dumps({"camera": self.camera, "noise": asdict(self.noise),
                           "scene": asdict(self.scene)}, sort_keys=True)

    def describe(self):
        return {
            "camera": self.camera,
            "translation": self.scene.translation_enabled,
            "noise_type": self.noise.noise_type,
            "level": self.noise.level,
            "beta_lo": self.noise.beta_range[0],
            "beta_hi": self.noise.beta_range[1],
            "offset": self.offset_fraction,
            "init_perturbation": self.init_perturbation,
        }


def cell_hash(cell):
    return int.from_bytes(hashlib.blake2b(cell.key().encode(), digest_size=8).digest(), "little")


def trial_seed(master_seed, cell, trial):
    ss = np.random.SeedSequence([int(master_seed), cell_hash(cell), int(trial)])
    return int(ss.generate_state(1, np.uint64)[0])


def cell_params(master_seed, cell):
    # trial indices are nonnegative, so tag 2**63 never collides with a trial stream
    rng = make_rng([int(master_seed), cell_hash(cell), 2**63])
    return experiment_params(cell.noise, rng)


def initial_rotation(cell, R_true, master_seed, trial):
    if cell.init_perturbation is None:
        return np.eye(3)
    rng = make_rng([int(master_seed), cell_hash(cell), int(trial), 2])
    axis = normalize(rng.standard_normal(3))
    return axis_angle_to_rotation(axis, cell.init_perturbation) @ R_true


def _estimate_stack(name, f, fp, cov, config, R0):
    if name == "nec":
        return nec_estimate_batch(f, fp, config, R0)
    return pnec_estimate_batch(f, fp, cov, config, R0)


def _run_chunk(task):
    """Generate and solve trials ``[start, stop)`` of one cell.

    Returns per-trial arrays ``{estimator: (e_rot, e_t, energy)}``, the
    failure mask, and wall time per estimator.
    """
    cell, master_seed, start, stop, config, estimators = task
    params = cell_params(master_seed, cell)
    instances = []
    for trial in range(start, stop):
        inst = generate_instance(cell.scene, cell.noise, cell.camera,
                                 trial_seed(master_seed, cell, trial), params, config.kappa)
        if cell.offset_fraction > 0:
            rng = make_rng([int(master_seed), cell_hash(cell), int(trial), 1])
            inst = offset_covariances(inst, cell.offset_fraction, rng, config.kappa)
        instances.append(inst)
    f = np.stack([i.correspondences.f_host for i in instances])
    fp = np.stack([i.correspondences.f_target for i in instances])
    cov = np.stack([i.correspondences.cov_target for i in instances])
    R_true = np.stack([i.truth.rotation for i in instances])
    t_true = np.stack([i.truth.translation for i in instances])
    R0 = np.stack([initial_rotation(cell, i.truth.rotation, master_seed, trial)
                   for trial, i in zip(range(start, stop), instances)])
    out = {}
    for name in estimators:
        tic = time.perf_counter()
        with np.errstate(all="ignore"):
            try:
                res = _estimate_stack(name, f, fp, cov, config, R0)
                R, t = res["R"], res["t"]
            except (ArithmeticError, ValueError, np.linalg.LinAlgError):
                R, t = _estimate_one_by_one(name, f, fp, cov, config, R0)
            ok = np.all(np.isfinite(R), axis=(-2, -1)) & np.all(np.isfinite(t), axis=-1)
            R = np.where(ok[:, None, None], R, np.eye(3))
            t = np.where(ok[:, None], t, (0.0, 0.0, 1.0))
            e_rot = rotation_error(R_true, R)
            e_t = translation_error(t_true, t)
            energy = pnec_energy(f, fp, cov, R, t, config.regularization)
        wall = time.perf_counter() - tic
        nan = np.where(ok, 0.0, np.nan)
        out[name] = (e_rot + nan, e_t + nan, energy + nan, wall)
    return out


def _estimate_one_by_one(name, f, fp, cov, config, R0):
    R = np.full(f.shape[:1] + (3, 3), np.nan)
    t = np.full(f.shape[:1] + (3,), np.nan)
    for b in range(f.shape[0]):
        try:
            res = _estimate_stack(name, f[b:b + 1], fp[b:b + 1], cov[b:b + 1], config, R0[b:b + 1])
            R[b], t[b] = res["R"][0], res["t"][0]
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            pass
    return R, t


def run_experiment(grid, trials, parallelism=1, master_seed=0, config=None,
                   estimators=ESTIMATORS, chunk_size=CHUNK_SIZE, keep_trials=False,
                   executor=None):
    """Run every cell of ``grid`` for ``trials`` instances and summarize.

    Trials are processed in fixed chunks, so the numbers are identical for
    any ``parallelism``. Returns a list of row dicts, one per cell and
    estimator, in grid order. With ``keep_trials`` each row also carries
    the raw per-trial arrays. An existing ``executor`` may be passed to
    reuse a worker pool across calls.
    """
    config = config or SolverConfig()
    if trials < 1 or parallelism < 1:
        raise ValueError("trials and parallelism must be >= 1")
    tasks = []
    for ci, cell in enumerate(grid):
        for start in range(0, trials, chunk_size):
            tasks.append((ci, (cell, master_seed, start, min(start + chunk_size, trials),
                               config, tuple(estimators))))
    if executor is not None:
        results = list(executor.map(_run_chunk, [task for _, task in tasks]))
    elif parallelism == 1:
        results = [_run_chunk(task) for _, task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_chunk, [task for _, task in tasks]))

    rows = []
    for ci, cell in enumerate(grid):
        parts = [res for (cj, _), res in zip(tasks, results) if cj == ci]
        for name in estimators:
            e_rot = np.concatenate([p[name][0] for p in parts])
            e_t = np.concatenate([p[name][1] for p in parts])
            energy = np.concatenate([p[name][2] for p in parts])
            wall = sum(p[name][3] for p in parts)
            good = np.isfinite(e_rot)
            row = dict(cell.describe())
            row.update(
                estimator=name, trials=trials, failures=int(np.sum(~good)),
                mean_e_rot=_stat(np.mean, e_rot[good]), std_e_rot=_stat(np.std, e_rot[good]),
                mean_e_t=_stat(np.mean, e_t[good]) if cell.scene.translation_enabled else None,
                std_e_t=_stat(np.std, e_t[good]) if cell.scene.translation_enabled else None,
                median_energy=_stat(np.median, energy[good]),
                mean_wall_time=wall / trials,
            )
            if keep_trials:
                row["trials_e_rot"] = e_rot
                row["trials_e_t"] = e_t
            rows.append(row)
        log.info("cell %d/%d done: %s", ci + 1, len(grid), cell.describe())
    return rows


def _stat(fn, x):
    return float(fn(x)) if x.size else float("nan")
