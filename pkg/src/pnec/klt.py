"""2D feature position covariance from a KLT patch (Laplace approximation).

Coordinates are ``(x, y)`` with ``x`` along columns. Pattern offsets are
relative to the patch centre; an SE(2) transform ``(u, v, theta)`` maps an
offset ``p`` to ``R_theta p + (u, v)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegeneratePatchError, OutOfBoundsError

TIKHONOV = 1e-8
# eigenvalue ratio below which J^T J counts as rank deficient
_RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Patch:
    intensities: np.ndarray
    center: tuple | None = None  # (x, y); defaults to (cols // 2, rows // 2)

    def __post_init__(self):
        img = np.array(self.intensities, dtype=float)
        if img.ndim != 2 or min(img.shape) < 3:
            raise ValueError("patch must be a 2D grid of at least 3x3")
        if not np.all(np.isfinite(img)):
            raise ValueError("patch intensities must be finite")
        img.setflags(write=False)
        object.__setattr__(self, "intensities", img)
        if self.center is None:
            object.__setattr__(self, "center", (img.shape[1] // 2, img.shape[0] // 2))

    @property
    def gradient(self):
        """Central-difference gradient ``(gx, gy)``; zero on the border."""
        img = self.intensities
        gx = np.zeros_like(img)
        gy = np.zeros_like(img)
        gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
        gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
        return gx, gy


@dataclass(frozen=True, eq=False)
class Pattern:
    offsets: np.ndarray  # (P, 2)

    def __post_init__(self):
        off = np.array(self.offsets, dtype=float)
        if off.ndim != 2 or off.shape[1] != 2 or len(off) < 3:
            raise ValueError("pattern needs at least 3 two-dimensional offsets")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    def __len__(self):
        return len(self.offsets)


def default_pattern():
    """52 offsets: the 8x8 grid ``{-4..-1, 1..4}^2`` minus 3 cells per corner."""
    axis = [-4, -3, -2, -1, 1, 2, 3, 4]
    pts = [(x, y) for y in axis for x in axis
           if not (abs(x) >= 3 and abs(y) >= 3 and abs(x) + abs(y) >= 7)]
    return Pattern(np.array(pts, dtype=float))


@dataclass(frozen=True)
class Se2Covariance:
    matrix: np.ndarray   # over (u px, v px, theta rad)
    degenerate: bool = False


def bilinear(img, x, y):
    """Sample ``img`` at real coordinates; raises if any point is off the grid."""
    img = np.asarray(img, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rows, cols = img.shape
    eps = 1e-9
    if np.any((x < -eps) | (y < -eps) | (x > cols - 1 + eps) | (y > rows - 1 + eps)):
        raise OutOfBoundsError("pattern point outside the patch")
    x = np.clip(x, 0.0, cols - 1.0)
    y = np.clip(y, 0.0, rows - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), cols - 2)
    y0 = np.minimum(np.floor(y).astype(int), rows - 2)
    ax, ay = x - x0, y - y0
    return ((1 - ay) * ((1 - ax) * img[y0, x0] + ax * img[y0, x0 + 1])
            + ay * ((1 - ax) * img[y0 + 1, x0] + ax * img[y0 + 1, x0 + 1]))


def transform_points(offsets, transform):
    u, v, theta = transform
    c, s = np.cos(theta), np.sin(theta)
    x, y = offsets[:, 0], offsets[:, 1]
    return np.stack([c * x - s * y + u, s * x + c * y + v], axis=1)


def _sample(patch, pts):
    cx, cy = patch.center
    return bilinear(patch.intensities, cx + pts[:, 0], cy + pts[:, 1])


def klt_energy(host, target, transform, pattern):
    """Sum of squared mean-normalized intensity differences over the pattern."""
    ih = _sample(host, pattern.offsets)
    it = _sample(target, transform_points(pattern.offsets, transform))
    return float(np.sum((ih / ih.mean() - it / it.mean()) ** 2))


def se2_jacobian(host, pattern):
    """Stacked per-pixel Jacobians ``(P, 3)`` of the normalized intensity."""
    off = pattern.offsets
    cx, cy = host.center
    xs, ys = cx + off[:, 0], cy + off[:, 1]
    rows, cols = host.intensities.shape
    if (np.any(xs != np.round(xs)) or np.any(ys != np.round(ys))
            or np.any((xs < 1) | (xs > cols - 2) | (ys < 1) | (ys > rows - 2))):
        raise OutOfBoundsError("pattern must sit on interior pixels of the host patch")
    xi, yi = xs.astype(int), ys.astype(int)
    gx, gy = host.gradient
    I = host.intensities[yi, xi]
    grad = np.stack([gx[yi, xi], gy[yi, xi]], axis=1)
    # J_xi = [[1, 0, -p_y], [0, 1, p_x]]
    g_xi = np.stack([grad[:, 0], grad[:, 1], -off[:, 1] * grad[:, 0] + off[:, 0] * grad[:, 1]], axis=1)
    total = I.sum()
    if total == 0:
        raise DegeneratePatchError("pattern intensities sum to zero")
    n = len(off)
    return n * (g_xi * total - I[:, None] * g_xi.sum(axis=0)) / total**2


def se2_covariance(host, pattern=None):
    """Inverse Gauss-Newton Hessian ``(J^T J)^-1`` of the KLT energy.

    A rank-deficient ``J^T J`` (aperture problem) is inverted with Tikhonov
    damping ``1e-8 tr / 3`` and flagged as degenerate; an all-zero one
    raises ``DegeneratePatchError``.
    """
    pattern = pattern or default_pattern()
    J = se2_jacobian(host, pattern)
    H = J.T @ J
    tr = np.trace(H)
    if not tr > 0:
        raise DegeneratePatchError("patch has no usable gradient")
    vals = np.linalg.eigvalsh(H)
    degenerate = bool(vals[0] <= _RANK_TOL * vals[-1])
    if degenerate:
        H = H + TIKHONOV * tr / 3.0 * np.eye(3)
    cov = np.linalg.inv(H)
    return Se2Covariance(0.5 * (cov + cov.T), degenerate)


def rotation_2d(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def position_covariance_in_target(se2, theta):
    """Positional marginal rotated into the target frame."""
    m = se2.matrix if isinstance(se2, Se2Covariance) else np.asarray(se2, dtype=float)
    R = rotation_2d(theta)
    return R @ m[:2, :2] @ R.T


def read_pgm(path):
    """Read a plain (P2) or binary (P5) portable graymap."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, with '#' comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P2":
        values = np.array(data[pos:].split(), dtype=float)
    elif magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        values = np.frombuffer(data[pos + 1:], dtype=dtype).astype(float)
    else:
        raise ValueError(f"not a PGM file: magic {magic!r}")
    if values.size < w * h:
        raise ValueError("PGM file is truncated")
    return values[:w * h].reshape(h, w)


def write_pgm(path, img, maxval=255, binary=False):
    img = np.asarray(img)
    h, w = img.shape
    vals = np.clip(np.round(img), 0, maxval).astype(int)
    if binary:
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + vals.astype(dtype).tobytes())
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in vals)
        Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n{rows}\n")
