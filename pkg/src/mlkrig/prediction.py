"""Universal kriging through the detail transform.

``gamma_W`` solves ``W C W^T gamma_W = W Z`` by PCG; then ``gamma = W^T
gamma_W`` satisfies ``M^T gamma = 0`` automatically, ``beta`` follows from a
least-squares fit of ``Z - C gamma`` and the predictor is

    Z(x0) = k(x0)^T beta + c(x0)^T gamma.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla

from .kernels import KernelSpec, cov_matrix, cov_matvec
from .multilevel_basis import MultiLevelBasis, design_matrix, monomials
from .sparse_solver import (BlockPreconditioner, PCGResult, build_preconditioner,
                            lanczos_extremes, pcg_solve)

log = logging.getLogger(__name__)

DENSE_OPERATOR_N = 6000
AUTO_KAPPA = 100.0


class TrendRankError(np.linalg.LinAlgError):
    pass


@dataclass
class KrigingSolution:
    gamma_W: np.ndarray
    gamma: np.ndarray
    beta_hat: np.ndarray
    iterations: int
    residual: float
    residual_history: list = field(default_factory=list)
    preconditioned: bool = True

    def diagnostics(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "preconditioned": self.preconditioned}


class CWOperator:
    """``v -> W C W^T v`` with ``C`` dense (small N) or by direct summation."""

    def __init__(self, basis: MultiLevelBasis, kernel: KernelSpec, points, mode: str = "auto",
                 C: Optional[np.ndarray] = None):
        self.basis = basis
        self.kernel = kernel
        self.points = np.ascontiguousarray(np.asarray(points, dtype=float))
        N = self.points.shape[0]
        if mode == "auto":
            mode = "dense" if (C is not None or N <= DENSE_OPERATOR_N) else "direct"
        if mode not in ("dense", "direct"):
            raise ValueError("mode must be 'auto', 'dense' or 'direct'")
        self.mode = mode
        self.C = (C if C is not None else cov_matrix(self.points, self.points, kernel)) if mode == "dense" else None
        self.dim = basis.n_details
        self.count = 0

    def cov(self, v: np.ndarray) -> np.ndarray:
        if self.C is not None:
            return self.C @ v
        return cov_matvec(self.points, self.kernel, v)

    def matvec(self, v):
        self.count += 1
        W = self.basis.W
        return W @ self.cov(W.T @ v)

    __call__ = matvec


def _trend_matrix(M, points=None) -> np.ndarray:
    if hasattr(M, "matrix") and hasattr(M, "rank"):
        M.require_full_rank()
        return M.matrix
    if hasattr(M, "array") and hasattr(M, "kind"):
        return design_matrix(points, M).require_full_rank().matrix
    M = np.asarray(M, dtype=float)
    r = np.linalg.matrix_rank(M)
    if r < M.shape[1]:
        raise TrendRankError(f"trend matrix has rank {r} < {M.shape[1]}")
    return M


def recover_beta(gamma, Z, M, kernel: KernelSpec, points, C: Optional[np.ndarray] = None) -> np.ndarray:
    """Least-squares ``beta = (M^T M)^{-1} M^T (Z - C gamma)``."""
    X = np.asarray(points, dtype=float)
    Mm = _trend_matrix(M, X)
    gamma = np.asarray(gamma, dtype=float)
    Cg = C @ gamma if C is not None else cov_matvec(X, kernel, gamma)
    beta, *_ = np.linalg.lstsq(Mm, np.asarray(Z, dtype=float) - Cg, rcond=None)
    return beta


def solve_gamma(basis: MultiLevelBasis, kernel: KernelSpec, points, Z, precond_on: Union[bool, str] = True,
                eps: float = 1e-3, max_iter: int = 5000, trend=None, mode: str = "auto",
                operator: Optional[CWOperator] = None) -> KrigingSolution:
    """Kriging weights through PCG on the multi-level system.

    ``precond_on="auto"`` uses the identity when a short Lanczos probe finds
    ``kappa(C_W) < 100``.  ``trend`` (index set, design matrix or array)
    defaults to the basis trend set and is only needed for ``beta``.
    """
    X = np.asarray(points, dtype=float)
    Z = np.asarray(Z, dtype=float)
    op = operator or CWOperator(basis, kernel, X, mode)
    ZW = basis.W @ Z
    trend = basis.trend_set if trend is None else trend

    if op.dim == 0 or np.linalg.norm(ZW) <= 1e-12 * max(np.linalg.norm(Z), 1e-300):
        gW = np.zeros(op.dim)
        res = PCGResult(gW, 0, [0.0], 0.0, True)
        use_pc = bool(precond_on)
    else:
        use_pc = bool(precond_on)
        if precond_on == "auto":
            lo, hi = lanczos_extremes(op.matvec, op.dim, 30)
            use_pc = not (lo > 0 and hi / lo < AUTO_KAPPA)
            log.info("Lanczos probe kappa ~ %.3g; preconditioner %s", hi / max(lo, 1e-300),
                     "on" if use_pc else "off")
        P = build_preconditioner(basis, kernel, X, C=op.C) if use_pc else BlockPreconditioner.eye(op.dim)
        res = pcg_solve(op.matvec, P, ZW, eps, max_iter)
        gW = res.x
    gamma = basis.W.T @ gW
    beta = recover_beta(gamma, Z, trend, kernel, X, op.C) if trend is not None else np.zeros(basis.p)
    return KrigingSolution(gW, gamma, beta, res.iterations, res.residual, res.residual_history, use_pc)


def predict(x0, beta_hat, gamma, kernel: KernelSpec, points, trend_set) -> np.ndarray:
    """``k(x0)^T beta + c(x0)^T gamma`` at one point (scalar) or many (array)."""
    X = np.asarray(points, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    T = np.atleast_2d(x0)
    if T.shape[1] != X.shape[1]:
        raise ValueError("target dimension does not match the observations")
    c = cov_matrix(T, X, kernel)
    out = monomials(T, trend_set.array) @ np.asarray(beta_hat) + c @ np.asarray(gamma)
    return float(out[0]) if single else out


class DenseKriging:
    """Dense reference solver: saddle system, GLS beta, BLUP and MSE."""

    def __init__(self, kernel: KernelSpec, points, trend_set, C: Optional[np.ndarray] = None):
        self.kernel = kernel
        self.X = np.asarray(points, dtype=float)
        if C is None and self.X.shape[0] > DENSE_OPERATOR_N:
            raise ValueError(f"dense kriging is capped at N={DENSE_OPERATOR_N}, got {self.X.shape[0]}")
        self.trend_set = trend_set
        self.M = design_matrix(self.X, trend_set).require_full_rank().matrix
        self.C = cov_matrix(self.X, self.X, kernel) if C is None else C
        self.cf = sla.cho_factor(self.C, lower=True)
        self.CiM = sla.cho_solve(self.cf, self.M)
        self.S = self.M.T @ self.CiM                      # M^T C^{-1} M
        self.Sf = sla.cho_factor(0.5 * (self.S + self.S.T), lower=True)

    def saddle_solve(self, Z) -> tuple[np.ndarray, np.ndarray]:
        """Solve ``[[C, M], [M^T, 0]] [gamma; beta] = [Z; 0]``."""
        Z = np.asarray(Z, dtype=float)
        CiZ = sla.cho_solve(self.cf, Z)
        beta = sla.cho_solve(self.Sf, self.M.T @ CiZ)
        gamma = CiZ - self.CiM @ beta
        return gamma, beta

    def predict(self, x0, Z) -> np.ndarray:
        gamma, beta = self.saddle_solve(Z)
        return predict(x0, beta, gamma, self.kernel, self.X, self.trend_set)

    def mse(self, x0) -> np.ndarray:
        T = np.atleast_2d(np.asarray(x0, dtype=float))
        c = cov_matrix(self.X, T, self.kernel)            # N x m
        k = monomials(T, self.trend_set.array).T           # p x m
        Cic = sla.cho_solve(self.cf, c)
        u = self.M.T @ Cic - k
        quad = np.sum(u * sla.cho_solve(self.Sf, u), axis=0)
        out = 1.0 + quad - np.sum(c * Cic, axis=0)
        return out


def prediction_mse(x0, kernel: KernelSpec, points, trend_set):
    """Universal-kriging mean squared error at ``x0`` (dense path)."""
    out = DenseKriging(kernel, points, trend_set).mse(x0)
    return float(out[0]) if np.asarray(x0).ndim == 1 else out
