"""Acceptance criteria 1-10, each at its stated tolerance.

Every test is named ``test_criterion_<k>_...``; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run.
"""

import json
import math
import time

import numpy as np
import pytest
import scipy.sparse as sp

from mlkrig.bench import bench_prediction, bench_sparsity
from mlkrig.cli import main
from mlkrig.covariance_assembly import SparsityPattern, assemble_dense_CW
from mlkrig.error_bounds import bound_report, inverse_perturbation_bound
from mlkrig.estimation import MultilevelLikelihood, dense_w_loglik, mle_fit, multilevel_loglik
from mlkrig.field_synthesis import sample_field, sample_points
from mlkrig.index_sets import build_index_set
from mlkrig.kernels import KernelSpec, cov_matrix
from mlkrig.multilevel_basis import build_basis, design_matrix
from mlkrig.partition_tree import build_tree
from mlkrig.prediction import DenseKriging, predict, solve_gamma
from mlkrig.sparse_solver import NotSPDError, build_preconditioner, pcg_solve, sparse_cholesky


def geometry(X, kind, d, w, rule="kD", n0=None, seed=0, allow_rank_deficient=False):
    S = build_index_set(kind, d, w)
    tree = build_tree(X, n0 or 2 * len(S), rule, seed)
    return S, tree, build_basis(tree, X, S, allow_rank_deficient=allow_rank_deficient)


def kappa(A):
    ev = np.linalg.eigvalsh(A)
    return ev[-1] / ev[0]


# ---------------------------------------------------------------- 1


def test_criterion_1_cardinalities():
    t0 = time.perf_counter()
    got = {("TD", 3, 7): len(build_index_set("TD", 3, 7)), ("TD", 3, 4): len(build_index_set("TD", 3, 4)),
           ("HC", 50, 4): len(build_index_set("HC", 50, 4)), ("HC", 50, 5): len(build_index_set("HC", 50, 5))}
    elapsed = time.perf_counter() - t0
    print("cardinalities", got, f"{elapsed:.3f}s")
    assert got == {("TD", 3, 7): 120, ("TD", 3, 4): 35, ("HC", 50, 4): 1376, ("HC", 50, 5): 1426}
    assert elapsed < 1.0


# ---------------------------------------------------------------- 2


def test_criterion_2_basis_correctness():
    rng = np.random.default_rng(2024)
    levels = {("TD", 2): 3, ("TD", 5): 2, ("TD", 10): 1, ("SM", 2): 3, ("SM", 5): 2, ("SM", 10): 1,
              ("HC", 2): 6, ("HC", 5): 4, ("HC", 10): 3}
    t0 = time.perf_counter()
    for inst in range(20):
        d = int(rng.choice([2, 5, 10]))
        kind = str(rng.choice(["TD", "SM", "HC"]))
        rule = str(rng.choice(["RP", "kD"]))
        w = int(rng.integers(0, levels[(kind, d)] + 1))
        N = int(rng.integers(200, 4001))
        X = sample_points("cube", N, d, inst)
        S, tree, B = geometry(X, kind, d, w, rule, seed=inst, allow_rank_deficient=True)
        W, L = B.W, B.L
        # P P^T - I block by block: W W^T is sparse, L is p x N
        WWt = (W @ W.T - sp.identity(W.shape[0])).tocoo()
        err_ww = np.max(np.abs(WWt.data)) if WWt.nnz else 0.0
        err_wl = np.max(np.abs(W @ L.T)) if L.size and W.shape[0] else 0.0
        err_ll = np.max(np.abs(L @ L.T - np.eye(L.shape[0])))
        M = design_matrix(X, S).matrix
        err_wm = np.max(np.abs(W @ M)) if W.shape[0] else 0.0
        pt = B.p_tilde
        counts_ok = all(B.rows_in_level(q) <= pt * 2 ** q for q in range(B.t + 1))
        counts_ok &= B.rows_in_level(-1) <= pt - B.p
        support_ok = all(b.indices.size <= 2 ** (B.t - q + 1) * pt
                         and np.isin(b.indices, tree.indices(b.node)).all()
                         for q in range(B.t + 1) for b in B.blocks[q])
        print(f"inst {inst:2d} N={N} d={d} {kind} w={w} {rule} p={B.p} t={B.t} "
              f"PPt={max(err_ww, err_wl, err_ll):.1e} WM={err_wm:.1e}")
        assert max(err_ww, err_wl, err_ll) <= 1e-10
        assert err_wm <= 1e-10
        assert counts_ok and support_ok
        assert B.p + B.n_details == N
    assert time.perf_counter() - t0 < 120


# ---------------------------------------------------------------- 3


@pytest.mark.parametrize("nu,rho", [(0.5, 0.3), (1.25, 1.0), (2.5, 0.5)])
def test_criterion_3_condition_chain(nu, rho):
    X = sample_points("cube", 2000, 3, 3)
    S, tree, B = geometry(X, "TD", 3, 2)
    k = KernelSpec("matern", nu, rho)
    C = cov_matrix(X, X, k)
    CW = assemble_dense_CW(B, k, X, C=C)
    chain = [kappa(CW[:B.partial_dim(n), :B.partial_dim(n)]) for n in range(B.t, -2, -1)] + [kappa(C)]
    print("kappa chain", ["%.3g" % v for v in chain])
    for a, b in zip(chain, chain[1:]):
        assert a <= b * (1 + 1e-8)


def test_criterion_3_condition_trend():
    X = sample_points("cube", 2000, 5, 6)
    k = KernelSpec("matern", 1.0, 10.0)
    C = cov_matrix(X, X, k)
    kC = kappa(C)
    out = {}
    for w in (1, 2, 3):
        S, tree, B = geometry(X, "TD", 5, w)
        out[w] = kappa(assemble_dense_CW(B, k, X, C=C))
    print("kappa(C) %.3e" % kC, {w: "%.3e" % v for w, v in out.items()})
    assert all(v <= kC * (1 + 1e-8) for v in out.values())
    assert out[max(out)] * 1e2 <= kC


# ---------------------------------------------------------------- 4


def test_criterion_4_sparsification_quality():
    X = sample_points("sphere", 2000, 3, 0)
    k = KernelSpec("matern", 0.5, 10.0)
    C = cov_matrix(X, X, k)
    S, tree, B = geometry(X, "TD", 3, 4, n0=36, allow_rank_deficient=True)
    n = B.t                                  # finest-level block
    m = B.partial_dim(n)
    ref = np.linalg.slogdet(assemble_dense_CW(B, k, X, C=C)[:m, :m])[1]
    rows = []
    for tau in (0.0, 0.01, 0.05, 0.2, 0.5):
        A = SparsityPattern(B, tree, X, tau, n, "both").assemble(k, C=C)
        try:
            err = abs(sparse_cholesky(A.matrix).log_det() - ref) / abs(ref)
        except NotSPDError:
            err = math.inf
        rows.append((tau, A.density, err))
        print(f"tau={tau} size={m} nnz={100 * A.density:.1f}% log-det rel err={err:.2e}")
    errs = [e for *_, e in rows]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert any(dens <= 0.15 and e <= 2e-2 for _, dens, e in rows)


# ---------------------------------------------------------------- 5


def test_criterion_5_solver_equivalence():
    eps = 1e-3
    k = KernelSpec("matern", 0.75, 1 / 6)
    X = sample_points("cube", 1000, 3, 0)
    Z = sample_field(X, k, seed=1)
    S, tree, B = geometry(X, "TD", 3, 7)
    sol = solve_gamma(B, k, X, Z, True, eps)
    dk = DenseKriging(k, X, S)
    g, _ = dk.saddle_solve(Z)
    gerr = np.linalg.norm(sol.gamma - g) / np.linalg.norm(g)
    interp = np.max(np.abs(predict(X[:50], sol.beta_hat, sol.gamma, k, X, S) - Z[:50]))
    loo, loo_eps = [], 1e-6      # eps above fixes the gamma check only
    for i in (0, 250, 500, 999):
        keep = np.arange(1000) != i
        Xi, Zi = X[keep], Z[keep]
        _, _, Bi = geometry(Xi, "TD", 3, 7)
        si = solve_gamma(Bi, k, Xi, Zi, True, loo_eps)
        ml = predict(X[i], si.beta_hat, si.gamma, k, Xi, S)
        ref = DenseKriging(k, Xi, S).predict(X[i], Zi)
        loo.append(abs(ml - ref) / abs(ref))
    print(f"gamma rel err {gerr:.2e}  interp {interp:.2e}  loo {max(loo):.2e}  itr {sol.iterations}")
    assert gerr <= 10 * eps
    assert max(loo) <= 1e-4
    assert interp <= 10 * eps * np.max(np.abs(Z))


# ---------------------------------------------------------------- 6


def test_criterion_6_likelihood_equivalence():
    X = sample_points("cube", 1000, 3, 4)
    Z = sample_field(X, KernelSpec("matern", 1.25, 0.5), seed=5)
    S, tree, B = geometry(X, "TD", 3, 2)
    lik = MultilevelLikelihood(Z, B, tree, X, "matern", math.inf, -1)
    worst = 0.0
    for theta in [(0.5, 0.2), (0.75, 0.5), (1.25, 0.5), (1.5, 1.0), (2.5, 0.8)]:
        a = lik(theta).value
        b = dense_w_loglik(theta, Z, B, X)
        worst = max(worst, abs(a - b) / abs(b))
    print(f"worst relative gap {worst:.2e}")
    assert worst <= 1e-8


# ---------------------------------------------------------------- 7


def test_criterion_7_estimation_recovery():
    M = 20
    truth = np.array([1.25, 1.0])
    X = sample_points("sphere", 2000, 3, 0)
    S, tree, B = geometry(X, "TD", 3, 2, n0=64, allow_rank_deficient=True)
    Zs = sample_field(X, KernelSpec("matern", *truth), seed=1, replicates=M)
    base = MultilevelLikelihood(Zs[:, 0], B, tree, X, "matern", 1e-7, B.t, "both")
    est = np.array([mle_fit(None, B, tree, X, likelihood=base.with_data(Zs[:, r])).theta_hat
                    for r in range(M)])
    bias = est.mean(axis=0) - truth
    std = est.std(axis=0, ddof=1)
    print(f"bias nu {bias[0]:+.3f} rho {bias[1]:+.3f}  std nu {std[0]:.3f} rho {std[1]:.3f}")
    assert abs(bias[0]) <= 0.2
    assert std[0] <= 0.3
    assert abs(bias[1]) <= 0.15


# ---------------------------------------------------------------- 8


def test_criterion_8_error_bound_soundness():
    X = sample_points("cube", 800, 3, 0)
    checked = 0
    for w in (2, 4):
        S, tree, B = geometry(X, "TD", 3, w)
        for rho in (0.1, 0.3):
            k = KernelSpec("matern", 0.5, rho)
            D = assemble_dense_CW(B, k, X)
            Dinv = np.linalg.inv(D)
            ZW = B.W @ sample_field(X, k, seed=1)
            for tau in (0.5, 1.0, 2.0, 4.0):
                rep = bound_report(k, 3, w, 0, tree.t, -1, tau, len(S))
                Cs = SparsityPattern(B, tree, X, tau).assemble(k).toarray()
                ev = np.linalg.eigvalsh(Cs)
                E = np.linalg.norm(D - Cs, 2)
                if ev[0] <= 0:
                    print(f"skip w={w} rho={rho} tau={tau}: truncated matrix not SPD")
                    continue
                ib = inverse_perturbation_bound(ev[0], ev[-1], E)
                if not rep.C1_max < 1 or not ib.in_regime:
                    print(f"skip w={w} rho={rho} tau={tau}: C1={rep.C1_max:.3g} {ib.reason}")
                    continue
                inv = np.linalg.norm(Dinv - np.linalg.inv(Cs), 2)
                dx = np.linalg.norm(Dinv @ ZW - np.linalg.solve(Cs, ZW))
                print(f"w={w} rho={rho} tau={tau}: inv {inv:.2e} <= {ib.value:.2e}; "
                      f"dx {dx:.2e} <= {ib.value * np.linalg.norm(ZW):.2e}")
                assert inv <= ib.value
                assert dx <= ib.value * np.linalg.norm(ZW)
                checked += 1
    assert checked > 0


# ---------------------------------------------------------------- 9


def test_criterion_9_pcg_behaviour():
    cfg = {"d": 3, "Ns": [1000, 2000, 4000], "kernel": {"nu": 0.75, "rho": 1 / 6},
           "index_set": {"kind": "TD", "w": 7}, "tree": {"n0": 240}, "seed": 0, "kappa": False}
    rows = bench_prediction(cfg)
    its = [(r[0], r[2], r[6]) for r in rows]
    print("N, preconditioned, plain:", its)
    assert all(pre <= plain for _, pre, plain in its)
    assert its[0][1] < its[1][1] < its[2][1]
    assert its[0][2] < its[1][2] < its[2][2]


# ---------------------------------------------------------------- 10


def test_criterion_10_determinism(tmp_path):
    cfg = {"shape": "cube", "N": 300, "d": 3, "seed": 7, "kernel": {"family": "matern", "nu": 1.25, "rho": 0.5},
           "index_set": {"kind": "TD", "w": 2}, "tau": 1.0, "estimate": True, "optimizer": {"maxfev": 40},
           "targets": 25}
    bench_cfg = {"d": 3, "N": 300, "kernel": {"nu": 0.5, "rho": 0.5}, "index_set": {"kind": "TD", "w": 2},
                 "taus": [0.5, "inf"], "Ns": [200, 400], "M": 2, "optimizer": {"maxfev": 30},
                 "grid": [{"kind": "TD", "w": 1}]}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    (tmp_path / "bench.json").write_text(json.dumps(bench_cfg))
    for sub in ("a", "b"):
        out = tmp_path / sub
        base = ["--threads", "1", "--out-dir", str(out)]
        assert main(base + ["run", "--config", str(tmp_path / "run.json")]) == 0
        for cmd in ("bench-condition", "bench-sparsity", "bench-estimation", "bench-prediction"):
            assert main(base + [cmd, "--config", str(tmp_path / "bench.json")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.suffix in (".csv", ".json"))
    assert len(files) >= 14
    diff = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    print(f"{len(files)} files compared, differing: {diff}")
    assert not diff
