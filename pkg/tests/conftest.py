import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pnec.energy import CorrespondenceSet

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def rodrigues(axis, angle):
    """Independent axis-angle oracle (matrix exponential of the cross matrix)."""
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    out, term = np.eye(3), np.eye(3)
    for k in range(1, 40):
        term = term @ (angle * K) / k
        out = out + term
    return out


def random_unit(rng, size=None):
    v = rng.standard_normal((3,) if size is None else (size, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_rotation(rng, max_angle=np.pi):
    return rodrigues(random_unit(rng), rng.uniform(0, max_angle))


def random_spd(rng, n=3, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T + 0.1 * np.eye(n))


def exact_problem(rng, n=10, translation=True, cov_scale=1e-6):
    """Noise-free correspondences ``(set, R, t)`` with generic covariances."""
    R = random_rotation(rng, 0.5)
    t = random_unit(rng) if translation else np.zeros(3)
    X = random_unit(rng, n) * rng.uniform(4, 8, (n, 1))
    f = X / np.linalg.norm(X, axis=1, keepdims=True)
    Xp = (X - t) @ R
    fp = Xp / np.linalg.norm(Xp, axis=1, keepdims=True)
    cov = np.array([random_spd(rng, scale=cov_scale) for _ in range(n)])
    t_unit = t if translation else np.array([0.0, 0.0, 1.0])
    return CorrespondenceSet(f, fp, cov), R, t_unit


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
seeds = st.integers(0, 2**32 - 1)


@st.composite
def unit_vectors(draw):
    v = draw(arrays(np.float64, 3, elements=st.floats(-1, 1)))
    n = np.linalg.norm(v)
    if n < 1e-3:
        v, n = np.array([0.0, 0.0, 1.0]), 1.0
    return v / n


# acceptance criteria report: one line per criterion, printed after the run
ACCEPTANCE = {}


def report_criterion(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
