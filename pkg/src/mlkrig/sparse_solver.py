"""Sparse Cholesky with log-determinant, block preconditioner and PCG.

The factorization is the classical up-looking algorithm: an elimination
tree and column counts give the exact factor pattern, then each row of the
factor is computed from a sparse triangular solve whose nonzero pattern is
the elimination-tree reach of the corresponding matrix row.  Small or
nearly dense problems go through LAPACK instead.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from ._backend import core

log = logging.getLogger(__name__)

DENSE_DIM = 512
DENSE_FILL = 0.35
ORDERINGS = ("amd", "rcm", "natural")


class NotSPDError(np.linalg.LinAlgError):
    """Non-positive pivot; ``column`` is the failing index in the input ordering."""

    def __init__(self, column: int, step: int):
        super().__init__(f"matrix is not SPD: non-positive pivot at column {column}")
        self.column = int(column)
        self.step = int(step)


class PCGNonConvergence(RuntimeError):
    def __init__(self, result: "PCGResult"):
        super().__init__(
            f"PCG did not reach the tolerance in {result.iterations} iterations "
            f"(best relative residual {result.residual:.3e})"
        )
        self.result = result


def _as_sym_csc(A) -> sp.csc_matrix:
    if isinstance(A, np.ndarray):
        A = sp.csc_matrix(A)
    elif hasattr(A, "matrix") and sp.issparse(A.matrix):
        A = A.matrix
    A = sp.csc_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    A.sum_duplicates()
    A.sort_indices()
    return A


def fill_reducing_ordering(A, method: str = "amd") -> np.ndarray:
    """Permutation ``perm`` so that ``A[perm][:, perm]`` factors with little fill."""
    A = _as_sym_csc(A)
    n = A.shape[0]
    if method == "natural" or n <= 1:
        return np.arange(n, dtype=np.int64)
    if method == "rcm":
        return np.asarray(reverse_cuthill_mckee(A.tocsr(), symmetric_mode=True), dtype=np.int64)
    if method == "amd":
        from cvxopt import amd, spmatrix

        low = sp.tril(A).tocoo()
        S = spmatrix(np.ones(low.nnz).tolist(), low.row.tolist(), low.col.tolist(), (n, n))
        return np.array(amd.order(S), dtype=np.int64).ravel()
    raise ValueError(f"ordering must be one of {ORDERINGS}")


@dataclass
class SymbolicFactor:
    perm: np.ndarray
    parent: np.ndarray
    Lp: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.Lp[-1])


def symbolic_analysis(A, perm: np.ndarray) -> SymbolicFactor:
    """Elimination tree and column pointers of the factor of ``A[perm][:, perm]``."""
    B = _permute(A, perm)
    n = B.shape[0]
    Ap = B.indptr.astype(np.int64)
    Ai = B.indices.astype(np.int64)
    parent = core.etree(n, Ap, Ai)
    counts = core.column_counts(n, Ap, Ai, parent)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    return SymbolicFactor(np.asarray(perm, dtype=np.int64), parent, Lp)


def _permute(A, perm) -> sp.csc_matrix:
    A = _as_sym_csc(A)
    B = A[perm][:, perm].tocsc()
    B.sort_indices()
    return B


@dataclass
class CholeskyFactor:
    """``G G^T = A[perm][:, perm]`` with ``G`` lower triangular."""

    perm: np.ndarray
    n: int
    diag: np.ndarray
    Lp: Optional[np.ndarray] = None
    Li: Optional[np.ndarray] = None
    Lx: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None
    nnz_A: int = 0
    method: str = "sparse"

    @property
    def nnz(self) -> int:
        if self.dense is not None:
            return self.n * (self.n + 1) // 2
        return int(self.Lp[-1])

    @property
    def fill_ratio(self) -> float:
        """nnz(G) over nnz of the lower triangle of A."""
        return self.nnz / max(self.nnz_A, 1)

    @property
    def G(self) -> sp.csc_matrix:
        if self.dense is not None:
            return sp.csc_matrix(np.tril(self.dense))
        return sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=(self.n, self.n))

    def solve(self, b) -> np.ndarray:
        """``A^{-1} b`` for a vector or a matrix of column vectors."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError("right-hand side has the wrong length")
        if b.ndim == 2:
            return np.column_stack([self.solve(b[:, j]) for j in range(b.shape[1])])
        y = np.ascontiguousarray(b[self.perm])
        if self.dense is not None:
            y = sla.cho_solve((self.dense, True), y, check_finite=False)
        else:
            core.cholesky_solve(self.n, self.Lp, self.Li, self.Lx, y)
        x = np.empty_like(y)
        x[self.perm] = y
        return x

    def solve_lower(self, b) -> np.ndarray:
        """``G^{-1} b[perm]`` (half solve), used for quadratic forms."""
        y = np.asarray(b, dtype=float)[self.perm]
        if self.dense is not None:
            return sla.solve_triangular(self.dense, y, lower=True, check_finite=False)
        return sp.linalg.spsolve_triangular(self.G.tocsr(), y, lower=True)

    def quad_form(self, b) -> float:
        """``b^T A^{-1} b``."""
        b = np.asarray(b, dtype=float)
        return float(b @ self.solve(b))

    def log_det(self) -> float:
        return log_det(self)

    def diagnostics(self) -> dict:
        return {"n": self.n, "nnz_G": self.nnz, "nnz_A_lower": self.nnz_A,
                "fill_ratio": self.fill_ratio, "method": self.method}


def sparse_cholesky(A, ordering: str = "amd", dense_dim: int = DENSE_DIM,
                    dense_fill: float = DENSE_FILL, perm: Optional[np.ndarray] = None,
                    symbolic: Optional[SymbolicFactor] = None) -> CholeskyFactor:
    """Factor a symmetric positive definite matrix.

    ``symbolic`` may be passed to reuse the ordering and pattern analysis for
    a matrix with the same sparsity pattern.  Raises :class:`NotSPDError`.
    """
    A = _as_sym_csc(A)
    n = A.shape[0]
    nnz_A = int(sp.tril(A).nnz)
    if n == 0:
        return CholeskyFactor(np.zeros(0, dtype=np.int64), 0, np.zeros(0), dense=np.zeros((0, 0)),
                              nnz_A=0, method="dense")
    if symbolic is not None:
        perm = symbolic.perm
    elif perm is None:
        perm = fill_reducing_ordering(A, ordering) if n > dense_dim else np.arange(n, dtype=np.int64)
    perm = np.asarray(perm, dtype=np.int64)

    if symbolic is None and n > dense_dim:
        symbolic = symbolic_analysis(A, perm)
    use_dense = n <= dense_dim or symbolic.nnz > dense_fill * n * (n + 1) / 2

    if use_dense:
        B = A[perm][:, perm].toarray()
        c, info = sla.lapack.dpotrf(B, lower=1, clean=1, overwrite_a=1)
        if info > 0:
            raise NotSPDError(perm[info - 1], info - 1)
        if info < 0:
            raise ValueError("invalid argument to dpotrf")
        return CholeskyFactor(perm, n, np.diag(c).copy(), dense=c, nnz_A=nnz_A, method="dense")

    B = _permute(A, perm)
    Li, Lx, fail = core.cholesky_numeric(n, B.indptr.astype(np.int64), B.indices.astype(np.int64),
                                         B.data, symbolic.parent, symbolic.Lp)
    if fail >= 0:
        raise NotSPDError(perm[fail], fail)
    return CholeskyFactor(perm, n, Lx[symbolic.Lp[:-1]].copy(), symbolic.Lp, Li, Lx, nnz_A=nnz_A)


def log_det(factor: CholeskyFactor) -> float:
    """``log det A = 2 sum log G_ii``."""
    return float(2.0 * np.sum(np.log(factor.diag)))


# ---------------------------------------------------------------- preconditioner


@dataclass
class BlockPreconditioner:
    """Block-diagonal ``P_W`` with one Cholesky-factored block per cell."""

    dim: int
    starts: list[int] = field(default_factory=list)
    factors: list[np.ndarray] = field(default_factory=list)
    identity: bool = False

    @classmethod
    def eye(cls, dim: int) -> "BlockPreconditioner":
        return cls(dim, identity=True)

    def apply(self, r) -> np.ndarray:
        """``P_W^{-1} r``."""
        r = np.asarray(r, dtype=float)
        if self.identity:
            return r.copy()
        out = np.empty_like(r)
        for s, c in zip(self.starts, self.factors):
            k = c.shape[0]
            out[s:s + k] = sla.cho_solve((c, True), r[s:s + k], check_finite=False)
        return out

    __call__ = apply

    def block_matrix(self) -> np.ndarray:
        """Dense ``P_W`` (for tests)."""
        P = np.eye(self.dim)
        if not self.identity:
            for s, c in zip(self.starts, self.factors):
                L = np.tril(c)
                P[s:s + c.shape[0], s:s + c.shape[0]] = L @ L.T
        return P


def build_preconditioner(basis, kernel, points, tree=None, n: int = -1,
                         C: Optional[np.ndarray] = None) -> BlockPreconditioner:
    """Per-cell Gram blocks ``psi^T C(X_cell, X_cell) psi``, Cholesky factored.

    ``tree`` is accepted for interface symmetry; cells are read off ``basis``.
    """
    from .kernels import cov_matrix

    X = np.asarray(points, dtype=float)
    dim = basis.partial_dim(n)
    P = BlockPreconditioner(dim)
    for q in basis.level_order:
        if q < n:
            break
        for b in basis.blocks.get(q, []):
            if b.k == 0:
                continue
            K = C[np.ix_(b.indices, b.indices)] if C is not None else cov_matrix(X[b.indices], X[b.indices], kernel)
            G = b.psi.T @ K @ b.psi
            G = 0.5 * (G + G.T)
            c, info = sla.lapack.dpotrf(G, lower=1, clean=1)
            if info != 0:
                raise AssertionError(f"preconditioner block of cell {b.node} at level {q} is not SPD")
            P.starts.append(b.row0)
            P.factors.append(c)
    return P


# ---------------------------------------------------------------- PCG


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    residual_history: list[float]
    residual: float
    converged: bool

    def to_json(self) -> str:
        return json.dumps({"iterations": self.iterations, "residual": self.residual,
                           "converged": self.converged, "residual_history": self.residual_history})


Operator = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, sp.spmatrix]


def _as_callable(A) -> Callable[[np.ndarray], np.ndarray]:
    if callable(A) and not isinstance(A, np.ndarray) and not sp.issparse(A):
        return A
    if hasattr(A, "matvec"):
        return A.matvec
    if hasattr(A, "matrix") and sp.issparse(A.matrix):
        A = A.matrix
    return lambda v: A @ v


def pcg_solve(matvec: Operator, precond, b, eps: float = 1e-3, max_iter: int = 5000,
              check_every: int = 10, raise_on_fail: bool = True) -> PCGResult:
    """Preconditioned conjugate gradients with a true-residual stopping rule.

    Convergence means ``||b - A x|| <= eps ||b||`` for the unpreconditioned
    system; the recurrence residual only proposes candidates, which are then
    confirmed by an explicit product.  The true residual is also refreshed
    every ``check_every`` iterations to stop drift.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    A = _as_callable(matvec)
    M = (lambda r: r) if precond is None else (precond.apply if hasattr(precond, "apply") else precond)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return PCGResult(x, 0, [0.0], 0.0, True)
    r = b.copy()
    z = M(r)
    p = z.copy()
    rz = float(r @ z)
    history = [1.0]
    best_x, best_res = x.copy(), 1.0
    it = 0
    while it < max_iter:
        Ap = A(p)
        pAp = float(p @ Ap)
        if not pAp > 0:
            log.warning("PCG breakdown: p^T A p = %g", pAp)
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rel = float(np.linalg.norm(r)) / nb
        refresh = it % check_every == 0
        if rel <= eps or refresh:
            r = b - A(x)
            rel = float(np.linalg.norm(r)) / nb
        history.append(rel)
        if rel < best_res:
            best_x, best_res = x.copy(), rel
        if rel <= eps:
            return PCGResult(x, it, history, rel, True)
        z = M(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = PCGResult(best_x, it, history, best_res, False)
    if raise_on_fail:
        raise PCGNonConvergence(res)
    return res


# ---------------------------------------------------------------- spectrum


@dataclass
class SpectrumEstimate:
    sigma_min: float
    sigma_max: float
    approximate: bool = False
    iterations: tuple[int, int] = (0, 0)

    @property
    def condition(self) -> float:
        return self.sigma_max / self.sigma_min if self.sigma_min > 0 else np.inf


def _power(apply, dim: int, rtol: float, max_iter: int, seed: int) -> tuple[float, int]:
    x = np.random.default_rng(seed).standard_normal(dim)
    x /= np.linalg.norm(x)
    lam = 0.0
    for k in range(1, max_iter + 1):
        y = apply(x)
        new = float(x @ y)           # Rayleigh quotient
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            return 0.0, k
        x = y / ny
        if k > 1 and abs(new - lam) <= rtol * abs(new):
            return abs(new), k
        lam = new
    return abs(lam), max_iter


def lanczos_extremes(apply, dim: int, steps: int = 100, seed: int = 0) -> tuple[float, float]:
    """Smallest and largest Ritz values of a Lanczos run (full reorthogonalization)."""
    m = min(steps, dim)
    Q = np.zeros((dim, m + 1))
    q = np.random.default_rng(seed).standard_normal(dim)
    Q[:, 0] = q / np.linalg.norm(q)
    alpha = np.zeros(m)
    beta = np.zeros(m)
    k = m
    for j in range(m):
        w = apply(Q[:, j])
        alpha[j] = Q[:, j] @ w
        w -= Q[:, :j + 1] @ (Q[:, :j + 1].T @ w)
        w -= Q[:, :j + 1] @ (Q[:, :j + 1].T @ w)
        beta[j] = np.linalg.norm(w)
        if beta[j] <= 1e-12 * abs(alpha[j]):
            k = j + 1
            break
        Q[:, j + 1] = w / beta[j]
    ritz = sla.eigh_tridiagonal(alpha[:k], beta[:k - 1], eigvals_only=True)
    return float(ritz[0]), float(ritz[-1])


def extreme_singular_values(A, dim: Optional[int] = None, rtol: float = 1e-6, max_iter: int = 20000,
                            seed: int = 0) -> SpectrumEstimate:
    """``(sigma_min, sigma_max)`` of a symmetric positive definite operator.

    ``sigma_max`` by power iteration, ``sigma_min`` by inverse iteration
    through :func:`sparse_cholesky`.  If ``A`` is only a callable, or the
    factorization fails, ``sigma_min`` is the smallest Ritz value of a
    100-step Lanczos run and the result is flagged approximate.
    """
    apply = _as_callable(A)
    if dim is None:
        dim = A.shape[0] if hasattr(A, "shape") else A.dim
    if dim == 0:
        return SpectrumEstimate(0.0, 0.0)
    # Rayleigh quotients and Ritz values both bound the top eigenvalue from
    # below, so the larger of the two estimates is kept
    smax, it_max = _power(apply, dim, rtol, max_iter, seed)
    smax = max(smax, lanczos_extremes(apply, dim, 100, seed)[1])
    factor = None
    if not callable(A) or isinstance(A, np.ndarray) or sp.issparse(A) or hasattr(A, "matrix"):
        try:
            factor = sparse_cholesky(A)
        except NotSPDError as exc:
            log.info("inverse iteration unavailable: %s", exc)
    if factor is not None:
        inv, it_min = _power(factor.solve, dim, rtol, max_iter, seed + 1)
        inv = max(inv, lanczos_extremes(factor.solve, dim, 100, seed + 1)[1])
        return SpectrumEstimate(1.0 / inv, smax, False, (it_min, it_max))
    lo, _ = lanczos_extremes(apply, dim, 100, seed)
    return SpectrumEstimate(abs(lo), smax, True, (100, it_max))
