"""Fibonacci lattice on the unit sphere."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


def fibonacci_lattice(K):
    """``K`` quasi-uniform unit vectors, from (0, 1, 0) down to (0, -1, 0)."""
    if int(K) != K or K < 2:
        raise ValueError("lattice needs at least 2 points")
    return _lattice(int(K)).copy()


@lru_cache(maxsize=8)
def _lattice(K):
    golden_angle = math.pi * (3.0 - math.sqrt(5.0))
    k = np.arange(K, dtype=float)
    y = 1.0 - 2.0 * k / (K - 1)
    r = np.sqrt(np.clip(1.0 - y * y, 0.0, None))
    pts = np.stack([r * np.cos(k * golden_angle), y, r * np.sin(k * golden_angle)], axis=1)
    pts.setflags(write=False)
    return pts
