"""Multi-level log-likelihood and maximum-likelihood fitting of (nu, rho).

For the partial transform ``Z_W^n`` of the data and the truncated matrix
``C~^n_W(theta)`` the objective is

    l(theta) = -(N~/2) log(2 pi) - 1/2 log det C~ - 1/2 Z^T C~^{-1} Z.

The trend never enters: every detail vector is orthogonal to it.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .covariance_assembly import SparsityPattern, assemble_dense_CW
from .kernels import KernelSpec, cov_matrix
from .multilevel_basis import MultiLevelBasis, design_matrix, partial_transform
from .partition_tree import PartitionTree
from .sparse_solver import NotSPDError, fill_reducing_ordering, sparse_cholesky, symbolic_analysis

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)


@dataclass
class LikelihoodEvaluation:
    theta: tuple[float, float]
    n: int
    value: float
    logdet_term: float
    quad_term: float
    const_term: float
    spd: bool = True
    degenerate: bool = False
    diagnostics: dict = field(default_factory=dict)


@dataclass
class FitResult:
    theta_hat: tuple[float, float]
    value: float
    trace: list[tuple[float, float, float]]
    converged: bool
    n_evals: int
    identifiable: bool = True
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


class FitError(RuntimeError):
    pass


def _kernel(family: str, theta, aniso=None) -> KernelSpec:
    nu, rho = float(theta[0]), float(theta[1])
    return KernelSpec(family, nu, rho, aniso)


class MultilevelLikelihood:
    """Likelihood object that caches the geometry-only work.

    The partial transform of the data, the retained sparsity pattern and the
    symbolic factorization are computed once; each call only refills the
    pattern for the new parameters and refactors it numerically.
    """

    def __init__(self, Z, basis: MultiLevelBasis, tree: PartitionTree, points,
                 kernel_family: str = "matern", tau: float = math.inf, n: int = -1,
                 prune: str = "left", ordering: str = "amd"):
        self.basis = basis
        self.points = np.asarray(points, dtype=float)
        self.family = kernel_family
        self.n = n
        self.ordering = ordering
        self.ZW = partial_transform(basis, Z, n)
        self.dim = self.ZW.size
        self.pattern = SparsityPattern(basis, tree, self.points, tau, n, prune) if self.dim else None
        self._cache: dict = {}          # ordering and symbolic factor, shared by with_data copies

    def with_data(self, Z) -> "MultilevelLikelihood":
        """Same geometry and symbolic work, new observations."""
        other = copy.copy(self)
        other.ZW = partial_transform(self.basis, Z, self.n)
        return other

    def __call__(self, theta) -> LikelihoodEvaluation:
        th = (float(theta[0]), float(theta[1]))
        const = -0.5 * self.dim * LOG2PI
        if self.dim == 0:
            return LikelihoodEvaluation(th, self.n, const, 0.0, 0.0, const, degenerate=True)
        if not (th[0] > 0 and th[1] > 0) or not all(map(math.isfinite, th)):
            return LikelihoodEvaluation(th, self.n, -math.inf, -math.inf, -math.inf, const, spd=False)
        C = self.pattern.assemble(_kernel(self.family, th))
        try:
            if "perm" not in self._cache:
                perm = fill_reducing_ordering(C.matrix, self.ordering) if self.dim > 512 else None
                self._cache["symbolic"] = symbolic_analysis(C.matrix, perm) if perm is not None else None
                self._cache["perm"] = perm
            f = sparse_cholesky(C.matrix, perm=self._cache["perm"], symbolic=self._cache["symbolic"])
        except NotSPDError as exc:
            log.debug("theta=%s: %s", th, exc)
            return LikelihoodEvaluation(th, self.n, -math.inf, -math.inf, -math.inf, const, spd=False,
                                        diagnostics={"failed_column": exc.column})
        ld = -0.5 * f.log_det()
        quad = -0.5 * f.quad_form(self.ZW)
        diag = {"nnz": C.nnz, "density": C.density, **f.diagnostics()}
        return LikelihoodEvaluation(th, self.n, const + ld + quad, ld, quad, const, diagnostics=diag)


def multilevel_loglik(theta, Z, basis, tree, points, kernel_family: str = "matern",
                      tau: float = math.inf, n: int = -1) -> LikelihoodEvaluation:
    return MultilevelLikelihood(Z, basis, tree, points, kernel_family, tau, n)(theta)


def dense_w_loglik(theta, Z, basis: MultiLevelBasis, points, kernel_family: str = "matern") -> float:
    """Full-transform likelihood with dense ``W C W^T`` (oracle)."""
    ZW = basis.W @ np.asarray(Z, dtype=float)
    m = ZW.size
    if m == 0:
        return 0.0
    CW = assemble_dense_CW(basis, _kernel(kernel_family, theta), points)
    c = sla.cholesky(CW, lower=True)
    y = sla.solve_triangular(c, ZW, lower=True)
    return float(-0.5 * m * LOG2PI - np.sum(np.log(np.diag(c))) - 0.5 * y @ y)


def dense_profile_loglik(theta, Z, points, trend_set, kernel_family: str = "matern") -> tuple[float, np.ndarray]:
    """Profiled likelihood with the GLS estimate of beta; returns (value, beta)."""
    X = np.asarray(points, dtype=float)
    Z = np.asarray(Z, dtype=float)
    M = design_matrix(X, trend_set).require_full_rank().matrix
    C = cov_matrix(X, X, _kernel(kernel_family, theta))
    cf = sla.cho_factor(C, lower=True)
    CiM = sla.cho_solve(cf, M)
    beta = np.linalg.solve(M.T @ CiM, CiM.T @ Z)
    r = Z - M @ beta
    N = Z.size
    ld = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * N * LOG2PI - 0.5 * ld - 0.5 * r @ sla.cho_solve(cf, r)), beta


DEFAULT_OPT = {"theta0": (1.0, 1.0), "perturb": 0.2, "fatol": 1e-6, "maxfev": 500}


def mle_fit(Z, basis, tree, points, kernel_family: str = "matern", tau: float = math.inf,
            n: int = -1, optimizer_cfg: Optional[dict] = None,
            likelihood: Optional[MultilevelLikelihood] = None) -> FitResult:
    """Nelder-Mead on ``(log nu, log rho)`` maximizing the multi-level likelihood."""
    cfg = {**DEFAULT_OPT, **(optimizer_cfg or {})}
    th0 = np.asarray(cfg["theta0"], dtype=float)
    if th0.shape != (2,) or np.any(th0 <= 0):
        raise ValueError("theta0 must be two positive numbers")
    lik = likelihood or MultilevelLikelihood(Z, basis, tree, points, kernel_family, tau, n)
    trace: list[tuple[float, float, float]] = []
    quad: list[float] = []

    def objective(u):
        th = np.exp(u)
        ev = lik(th)
        trace.append((float(th[0]), float(th[1]), float(ev.value)))
        quad.append(float(ev.quad_term))
        return -ev.value if math.isfinite(ev.value) else 1e300

    u0 = np.log(th0)
    step = math.log1p(cfg["perturb"])
    simplex = np.array([u0, u0 + [step, 0.0], u0 + [0.0, step]])
    start_vals = [objective(v) for v in simplex]
    if all(v >= 1e300 for v in start_vals):
        raise FitError("likelihood is infeasible (not SPD) on the whole initial simplex; "
                       "increase tau or the index-set level w")
    # the log-det term moves with theta whatever the data, so identifiability
    # is judged on the data-dependent quadratic term alone
    identifiable = max(quad) - min(quad) >= cfg["fatol"]
    trace.clear()
    res = minimize(objective, u0, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": math.inf, "fatol": cfg["fatol"],
                            "maxfev": cfg["maxfev"]})
    th = np.exp(res.x)
    return FitResult((float(th[0]), float(th[1])), float(-res.fun), trace, bool(res.success),
                     int(res.nfev), identifiable, str(res.message))
