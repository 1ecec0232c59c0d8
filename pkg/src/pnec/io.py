"""Plain-text correspondence files.

One feature per line: 3 reals ``f_host``, 3 reals ``f_target`` and the
9 reals of the row-major 3x3 target covariance, whitespace-separated.
Text after ``#`` is ignored.
"""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from .energy import MIN_CORRESPONDENCES, CorrespondenceSet
from .errors import DegenerateConfigurationError, FileFormatError, InvalidCovarianceError
from .uncertainty import check_covariance

VALUES_PER_LINE = 15
UNIT_TOLERANCE = 1e-6


def parse_correspondences(text, source="<string>"):
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != VALUES_PER_LINE:
            raise FileFormatError(lineno, f"expected {VALUES_PER_LINE} values, got {len(parts)}")
        try:
            vals = np.array([float(p) for p in parts])
        except ValueError as exc:
            raise FileFormatError(lineno, str(exc)) from None
        if not np.all(np.isfinite(vals)):
            raise FileFormatError(lineno, "non-finite value")
        f, fp, cov = vals[:3], vals[3:6], vals[6:].reshape(3, 3)
        for name, v in (("f_host", f), ("f_target", fp)):
            norm = np.linalg.norm(v)
            if norm == 0:
                raise FileFormatError(lineno, f"{name} is the zero vector")
            if abs(norm - 1.0) > UNIT_TOLERANCE:
                warnings.warn(f"{source}:{lineno}: {name} has norm {norm:.9g}; normalizing",
                              stacklevel=2)
        try:
            check_covariance(cov)
        except InvalidCovarianceError as exc:
            raise FileFormatError(lineno, str(exc)) from None
        rows.append((f / np.linalg.norm(f), fp / np.linalg.norm(fp), cov))
    if len(rows) < MIN_CORRESPONDENCES:
        raise DegenerateConfigurationError(
            f"{source}: need at least {MIN_CORRESPONDENCES} correspondences, got {len(rows)}")
    f, fp, cov = (np.array(x) for x in zip(*rows))
    return CorrespondenceSet(f, fp, cov)


def read_correspondences(path):
    path = Path(path)
    return parse_correspondences(path.read_text(), str(path))


def format_correspondences(correspondences, header=None):
    lines = [f"# {h}" for h in (header or "").splitlines()]
    for f, fp, cov in zip(correspondences.f_host, correspondences.f_target,
                          correspondences.cov_target):
        lines.append(" ".join(repr(float(v)) for v in np.concatenate([f, fp, cov.ravel()])))
    return "\n".join(lines) + "\n"


def write_correspondences(path, correspondences, header=None):
    Path(path).write_text(format_correspondences(correspondences, header))
