"""Smallest-eigenpair helpers for stacks of symmetric 3x3 matrices."""
from __future__ import annotations

import numpy as np

from ..energy import gram_matrix


def smallest_eigenpair(M):
    """Eigenvector of the smallest eigenvalue and its Rayleigh quotient.

    The quotient is returned instead of the LAPACK eigenvalue because it
    keeps full relative accuracy when the eigenvalue is tiny compared to
    ``|M|`` (noise-free problems), and it never undershoots the true
    minimum of ``t^T M t``.
    """
    _, vecs = np.linalg.eigh(M)
    v = vecs[..., :, 0]
    lam = np.einsum("...i,...ij,...j->...", v, M, v)
    return v, lam


def largest_eigenvector(M):
    _, vecs = np.linalg.eigh(M)
    return vecs[..., :, -1]


def nec_translation(correspondences, R):
    """Unit translation minimizing the NEC energy for a fixed rotation.

    Returns ``(t, energy)`` where ``energy = lambda_min(M(R))``.
    """
    M = gram_matrix(correspondences.f_host, correspondences.f_target, np.asarray(R, dtype=float))
    t, lam = smallest_eigenpair(M)
    return t, float(lam)
