"""Desk-scale benchmark tables written as CSV with a JSON sidecar.

Wall-clock columns are left empty unless ``timings=True``; everything else
is a deterministic function of the config.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np

from .covariance_assembly import SparsityPattern, assemble_dense_CW
from .estimation import FitError, MultilevelLikelihood, mle_fit
from .field_synthesis import sample_field, sample_points
from .index_sets import build_index_set
from .kernels import KernelSpec, cov_matrix
from .multilevel_basis import build_basis
from .partition_tree import build_tree
from .pipeline import ConfigError, json_dump, parse_tau, write_csv
from .prediction import CWOperator, solve_gamma
from .sparse_solver import (NotSPDError, build_preconditioner, extreme_singular_values, pcg_solve,
                            sparse_cholesky)

DENSE_KAPPA_N = 4000

CONDITION_COLUMNS = ["kind", "w", "p", "kappa_C", "kappa_CW"]
SPARSITY_COLUMNS = ["N", "t", "n", "kappa_CW_tilde", "size", "tau", "t_ML", "nnz_pct", "t_con",
                    "nnz_G_pct", "t_chol", "logdet_rel_err"]
ESTIMATION_COLUMNS = ["N", "w", "t", "n", "mean_bias_nu", "mean_bias_rho", "std_nu", "std_rho",
                      "M", "std_flag", "n_failed"]
PREDICTION_COLUMNS = ["N", "kappa_C", "itr", "t_precond", "t_itr", "t_total", "itr_unprec"]


class _Clock:
    def __init__(self, on: bool):
        self.on = on
        self.values: dict[str, Optional[float]] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        yield
        self.values[name] = time.perf_counter() - t0 if self.on else None


def _kernel(cfg) -> KernelSpec:
    k = cfg.get("kernel")
    if not isinstance(k, dict) or "rho" not in k:
        raise ConfigError("kernel", "expected an object with at least 'rho'")
    return KernelSpec(k.get("family", "matern"), float(k.get("nu", 0.5)), float(k["rho"]))


def _get(cfg, key, default=None, required=False):
    if key not in cfg:
        if required:
            raise ConfigError(key, "required field is missing")
        return default
    return cfg[key]


def _geometry(X, kind, d, w, tree_cfg, allow_rank_deficient=False, a=0):
    S = build_index_set(kind, d, w)
    n0 = tree_cfg.get("n0") or 2 * len(build_index_set(kind, d, w + a))
    tree = build_tree(X, n0, tree_cfg.get("rule", "kD"), tree_cfg.get("seed", 0))
    return S, tree, build_basis(tree, X, S, a, allow_rank_deficient=allow_rank_deficient)


def _dense_kappa(A) -> float:
    ev = np.linalg.eigvalsh(A)
    return float(ev[-1] / ev[0]) if ev[0] > 0 else math.inf


def _sidecar(out, cfg, columns, extra=None):
    if out is None:
        return
    p = Path(out)
    json_dump({"config": cfg, "columns": columns, **(extra or {})}, p.with_name(p.name + ".json"))


def bench_condition(cfg: dict, out=None) -> list[list]:
    """kappa(C) and kappa(C_W) for each (kind, w) of the grid, dense eigensolver."""
    d = int(_get(cfg, "d", required=True))
    N = int(_get(cfg, "N", required=True))
    grid = _get(cfg, "grid", required=True)
    kern = _kernel(cfg)
    X = sample_points(_get(cfg, "shape", "cube"), N, d, int(_get(cfg, "seed", 0)))
    C = cov_matrix(X, X, kern)
    kC = _dense_kappa(C)
    rows = []
    for i, cell in enumerate(grid):
        if "kind" not in cell or "w" not in cell:
            raise ConfigError(f"grid[{i}]", "needs 'kind' and 'w'")
        S, tree, B = _geometry(X, cell["kind"], d, int(cell["w"]), _get(cfg, "tree", {}),
                               bool(cfg.get("allow_rank_deficient", False)))
        CW = assemble_dense_CW(B, kern, X, C=C)
        rows.append([cell["kind"], int(cell["w"]), B.p, kC, _dense_kappa(CW)])
    if out is not None:
        write_csv(out, CONDITION_COLUMNS, rows)
    _sidecar(out, cfg, CONDITION_COLUMNS)
    return rows


def bench_sparsity(cfg: dict, out=None, timings: bool = False) -> list[list]:
    """One row per tau: sparsity of C~^n_W, of its factor, and the log-det error."""
    d = int(_get(cfg, "d", required=True))
    N = int(_get(cfg, "N", required=True))
    s = _get(cfg, "index_set", required=True)
    kern = _kernel(cfg)
    n = int(_get(cfg, "n", -1))
    taus = [parse_tau(v, f"taus[{i}]") for i, v in enumerate(_get(cfg, "taus", required=True))]
    X = sample_points(_get(cfg, "shape", "cube"), N, d, int(_get(cfg, "seed", 0)))
    clk = _Clock(timings)
    with clk("t_ML"):
        S, tree, B = _geometry(X, s["kind"], d, int(s["w"]), _get(cfg, "tree", {}),
                               bool(s.get("allow_rank_deficient", False)), int(s.get("accuracy_offset", 0)))
    m = B.partial_dim(n)
    ld_ref = None
    C = None
    if N <= DENSE_KAPPA_N:
        C = cov_matrix(X, X, kern)
        D = assemble_dense_CW(B, kern, X, C=C)[:m, :m]
        sign, ld_ref = np.linalg.slogdet(D)
        ld_ref = float(ld_ref) if sign > 0 else None
    rows = []
    for tau in taus:
        with clk("t_con"):
            pat = SparsityPattern(B, tree, X, tau, n, _get(cfg, "prune", "left"))
            A = pat.assemble(kern, C=C)
        kappa = nnzG = err = None
        with clk("t_chol"):
            try:
                f = sparse_cholesky(A.matrix)
            except NotSPDError:
                f = None
        if f is not None:
            nnzG = 100.0 * f.nnz / (m * m)
            ld = f.log_det()
            if ld_ref is not None:
                err = abs(ld - ld_ref) / abs(ld_ref) if ld_ref != 0 else abs(ld)
            if m <= DENSE_KAPPA_N:
                kappa = _dense_kappa(A.toarray())
            else:
                kappa = extreme_singular_values(A.matrix).condition
        rows.append([N, B.t, n, kappa, m, tau, clk.values["t_ML"], 100.0 * A.density, clk.values["t_con"],
                     nnzG, clk.values["t_chol"], err])
    if out is not None:
        write_csv(out, SPARSITY_COLUMNS, rows)
    _sidecar(out, cfg, SPARSITY_COLUMNS, {"timings": timings})
    return rows


def bench_estimation(cfg: dict, out=None) -> list[list]:
    """Bias and spread of (nu, rho) over ``M`` synthetic replicates."""
    d = int(_get(cfg, "d", required=True))
    N = int(_get(cfg, "N", required=True))
    M = int(_get(cfg, "M", required=True))
    if M < 1:
        raise ConfigError("M", "must be >= 1")
    s = _get(cfg, "index_set", required=True)
    kern = _kernel(cfg)
    n = int(_get(cfg, "n", -1))
    tau = parse_tau(_get(cfg, "tau", "inf"))
    seed = int(_get(cfg, "seed", 0))
    X = sample_points(_get(cfg, "shape", "cube"), N, d, seed)
    S, tree, B = _geometry(X, s["kind"], d, int(s["w"]), _get(cfg, "tree", {}),
                           bool(s.get("allow_rank_deficient", False)), int(s.get("accuracy_offset", 0)))
    Zs = sample_field(X, kern, seed=seed + 1, replicates=M)
    est, failed = [], 0
    base = MultilevelLikelihood(Zs[:, 0], B, tree, X, kern.family, tau, n, _get(cfg, "prune", "left"))
    for r in range(M):
        try:
            fit = mle_fit(Zs[:, r], B, tree, X, kern.family, tau, n, _get(cfg, "optimizer", {}),
                          likelihood=base.with_data(Zs[:, r]))
        except (FitError, np.linalg.LinAlgError):      # counted, reported in the row
            failed += 1
            continue
        est.append(fit.theta_hat)
    E = np.array(est).reshape(-1, 2)
    if E.shape[0]:
        bias = E.mean(axis=0) - np.array([kern.nu, kern.rho])
        std = E.std(axis=0, ddof=1) if E.shape[0] > 1 else np.zeros(2)
    else:
        bias = std = np.full(2, np.nan)
    flag = "single_replicate" if E.shape[0] == 1 else ""
    rows = [[N, int(s["w"]), B.t, n, bias[0], bias[1], std[0], std[1], M, flag, failed]]
    if out is not None:
        write_csv(out, ESTIMATION_COLUMNS, rows)
    _sidecar(out, cfg, ESTIMATION_COLUMNS, {"estimates": E.tolist()})
    return rows


def bench_prediction(cfg: dict, out=None, timings: bool = False) -> list[list]:
    """PCG iteration counts for the kriging weights across ``Ns``."""
    d = int(_get(cfg, "d", required=True))
    s = _get(cfg, "index_set", required=True)
    kern = _kernel(cfg)
    eps = float(_get(cfg, "eps", 1e-3))
    seed = int(_get(cfg, "seed", 0))
    compare = bool(_get(cfg, "compare_unpreconditioned", True))
    rows = []
    for N in _get(cfg, "Ns", required=True):
        N = int(N)
        clk = _Clock(timings)
        X = sample_points(_get(cfg, "shape", "cube"), N, d, seed)
        Z = sample_field(X, kern, seed=seed + 1)
        with clk("t_total"):
            S, tree, B = _geometry(X, s["kind"], d, int(s["w"]), _get(cfg, "tree", {}),
                                   bool(s.get("allow_rank_deficient", False)))
            op = CWOperator(B, kern, X)
            with clk("t_precond"):
                P = build_preconditioner(B, kern, X, C=op.C)
            with clk("t_itr"):
                res = pcg_solve(op.matvec, P, B.W @ Z, eps)
        kappa = _dense_kappa(op.C) if (op.C is not None and N <= DENSE_KAPPA_N
                                       and bool(_get(cfg, "kappa", True))) else None
        unpre = solve_gamma(B, kern, X, Z, False, eps, operator=op).iterations if compare else None
        rows.append([N, kappa, res.iterations, clk.values["t_precond"], clk.values["t_itr"],
                     clk.values["t_total"], unpre])
    if out is not None:
        write_csv(out, PREDICTION_COLUMNS, rows)
    _sidecar(out, cfg, PREDICTION_COLUMNS, {"timings": timings})
    return rows
