"""Synthetic observation sites and Gaussian random field samples."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .kernels import DENSE_CAP, KernelSpec, cov_matrix
from .multilevel_basis import monomials

log = logging.getLogger(__name__)

SHAPES = ("cube", "sphere")


def sample_points(shape: str, N: int, d: int, seed: int = 0) -> np.ndarray:
    """``N`` points on ``[-1, 1]^d`` or the unit sphere in ``R^d``.

    Points are drawn one at a time from the stream, so the first ``N'``
    points of an ``N``-point sample equal the ``N'``-point sample.
    """
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    if shape not in SHAPES:
        raise ValueError(f"shape must be one of {SHAPES}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if shape == "cube":
        # row-major draws: point i uses variates i*d .. i*d + d - 1
        return rng.uniform(-1.0, 1.0, size=(N, d))
    G = rng.standard_normal(size=(N, d))
    nrm = np.linalg.norm(G, axis=1)
    while np.any(nrm == 0):  # measure zero, but keep the contract
        bad = nrm == 0
        G[bad] = rng.standard_normal(size=(int(bad.sum()), d))
        nrm = np.linalg.norm(G, axis=1)
    return G / nrm[:, None]


def field_factor(points, kernel: KernelSpec, cap: int = DENSE_CAP) -> np.ndarray:
    """Lower Cholesky factor of ``C(theta)``, with diagonal jitter on failure."""
    X = np.asarray(points, dtype=float)
    C = cov_matrix(X, X, kernel, cap=cap)
    c, info = sla.lapack.dpotrf(C, lower=1, clean=1)
    if info != 0:
        jitter = 1e-12 * np.trace(C) / C.shape[0]
        log.warning("covariance factorization failed at column %d; adding jitter %.3e", info - 1, jitter)
        C[np.diag_indices_from(C)] += jitter
        c, info = sla.lapack.dpotrf(C, lower=1, clean=1)
        if info != 0:
            raise np.linalg.LinAlgError(
                f"covariance is numerically singular (column {info - 1}); near-duplicate points?")
    return c


def sample_field(points, kernel: KernelSpec, beta=None, trend_set=None, seed: int = 0,
                 factor: Optional[np.ndarray] = None, replicates: Optional[int] = None) -> np.ndarray:
    """``Z = M beta + G xi`` with ``G G^T = C(theta)`` and ``xi`` standard normal.

    With ``replicates`` the result has one column per realization, drawn
    from generators seeded ``seed ^ r``.
    """
    X = np.asarray(points, dtype=float)
    N = X.shape[0]
    G = field_factor(X, kernel) if factor is None else factor
    trend = np.zeros(N)
    if beta is not None:
        if trend_set is None:
            raise ValueError("a trend set is needed with beta")
        beta = np.asarray(beta, dtype=float)
        trend = monomials(X, trend_set.array) @ beta
    if replicates is None:
        xi = np.random.Generator(np.random.PCG64(seed)).standard_normal(N)
        return trend + G @ xi
    out = np.empty((N, replicates))
    for r in range(replicates):
        xi = np.random.Generator(np.random.PCG64(seed ^ r)).standard_normal(N)
        out[:, r] = trend + G @ xi
    return out
