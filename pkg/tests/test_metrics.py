import numpy as np
import pytest
from hypothesis import given

from pnec.metrics import rotation_error, rpe, rpe1, rpen, translation_error

from conftest import random_rotation, random_unit, rodrigues, seeds


def trajectory(rng, n):
    out = [np.eye(3)]
    for _ in range(n - 1):
        out.append(out[-1] @ random_rotation(rng, 0.3))
    return np.array(out)


def test_rotation_error_zero(rng):
    R = random_rotation(rng)
    assert rotation_error(R, R) == pytest.approx(0, abs=1e-12)


def test_rotation_error_constructed(rng):
    for _ in range(20):
        R = random_rotation(rng)
        est = R @ rodrigues(random_unit(rng), np.radians(0.12))
        assert abs(rotation_error(R, est) - 0.12) < 1e-9


def test_rotation_error_symmetric(rng):
    A, B = random_rotation(rng), random_rotation(rng)
    assert rotation_error(A, B) == pytest.approx(rotation_error(B, A), abs=1e-12)


@given(seeds)
def test_rotation_error_triangle(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (random_rotation(rng) for _ in range(3))
    assert rotation_error(A, C) <= rotation_error(A, B) + rotation_error(B, C) + 1e-9


def test_rotation_error_batched(rng):
    A = np.array([random_rotation(rng) for _ in range(4)])
    B = np.array([random_rotation(rng) for _ in range(4)])
    out = rotation_error(A, B)
    assert out.shape == (4,) and np.isclose(out[2], rotation_error(A[2], B[2]))


def test_translation_error_cases():
    t = np.array([0.0, 0.0, 1.0])
    assert translation_error(t, t) == 0
    assert translation_error(t, np.array([1.0, 0, 0])) == pytest.approx(90)
    assert translation_error(t, -t) == pytest.approx(180)


def test_translation_error_small_angles(rng):
    t = random_unit(rng)
    est = rodrigues(np.cross(t, random_unit(rng)), np.radians(1e-7)) @ t
    assert translation_error(t, est) == pytest.approx(1e-7, rel=1e-6)


def test_rpe_identical(rng):
    traj = trajectory(rng, 6)
    assert all(rpe(traj, traj, d) == 0 for d in range(1, 6))


def test_rpe1_constructed_perturbation(rng):
    truth = trajectory(rng, 8)
    axis = random_unit(rng)
    D = rodrigues(axis, np.radians(0.1))
    est = [truth[0]]
    for i in range(1, 8):
        est.append(est[-1] @ (truth[i - 1].T @ truth[i]) @ D)
    assert rpe1(truth, np.array(est)) == pytest.approx(0.1, abs=1e-9)


def test_rpen_three_frames_by_hand(rng):
    truth = trajectory(rng, 3)
    est = np.array([R @ random_rotation(rng, 0.05) for R in truth])

    def residual(i, d):
        rel_t = truth[i].T @ truth[i + d]
        rel_e = est[i].T @ est[i + d]
        M = rel_t.T @ rel_e
        return np.degrees(np.arccos(np.clip((np.trace(M) - 1) / 2, -1, 1)))

    rmse1 = np.sqrt((residual(0, 1) ** 2 + residual(1, 1) ** 2) / 2)
    rmse2 = residual(0, 2)
    assert rpe(truth, est, 1) == pytest.approx(rmse1, rel=1e-9)
    assert rpe(truth, est, 2) == pytest.approx(rmse2, rel=1e-9)
    assert rpen(truth, est) == pytest.approx((rmse1 + rmse2) / 2, rel=1e-9)


def test_rpe_global_rotation_invariance(rng):
    for _ in range(100):
        truth = trajectory(rng, 5)
        est = np.array([R @ random_rotation(rng, 0.05) for R in truth])
        G = random_rotation(rng)
        assert rpe1(G @ truth, G @ est) == pytest.approx(rpe1(truth, est), abs=1e-9)
        assert rpen(G @ truth, G @ est) == pytest.approx(rpen(truth, est), abs=1e-9)


def test_rpe_zero_iff_relative_agree(rng):
    truth = trajectory(rng, 4)
    G = random_rotation(rng)
    # a constant right offset changes every relative rotation unless it commutes
    assert rpe1(truth, G @ truth) == pytest.approx(0, abs=1e-9)
    assert rpe1(truth, truth @ G) > 0


def test_rpe_validation(rng):
    a = trajectory(rng, 4)
    with pytest.raises(ValueError):
        rpe(a, a[:3], 1)
    with pytest.raises(ValueError):
        rpe(a, a, 4)
    with pytest.raises(ValueError):
        rpe(a, a, 0)
