"""Compiled core vs NumPy fallback on the hot kernels.

    python benchmarks/bench_core.py [--repeat 3] [--csv out.csv]

Each row reports the best-of-``repeat`` wall time of both backends, the
speedup and the largest relative disagreement of their outputs.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np
import scipy.sparse as sp

from mlkrig import _fallback
from mlkrig.kernels import KernelSpec, family_params
from mlkrig.sparse_solver import fill_reducing_ordering

try:
    from mlkrig import _core
except ImportError:  # pragma: no cover
    _core = None


def best_time(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def rel_diff(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def laplacian_2d(m, shift=0.1):
    T = sp.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1])
    I = sp.identity(m)
    return (sp.kron(T, I) + sp.kron(I, T) + shift * sp.identity(m * m)).tocsc()


def cases(rng):
    X = rng.uniform(-1, 1, size=(1500, 3))
    Y = rng.uniform(-1, 1, size=(1200, 3))
    v = rng.standard_normal(X.shape[0])
    z = rng.uniform(1e-3, 30.0, size=200_000)
    gen = family_params(KernelSpec("matern", 1.25, 0.5), 3)
    half = family_params(KernelSpec("matern", 1.5, 0.5), 3)

    def phi(mod, p):
        return lambda: mod.phi_of_scaled(z, p[0], p[1], p[2], p[3])

    def block(mod, p):
        return lambda: mod.kernel_block(X, Y, p[4], p[5], *p[:4])

    def block_sym(mod, p):
        return lambda: mod.kernel_block_sym(X, p[4], p[5], *p[:4])

    def matvec(mod, p):
        return lambda: mod.kernel_matvec(X, v, p[4], p[5], *p[:4])

    A = laplacian_2d(60)
    perm = fill_reducing_ordering(A, "amd")
    B = A[perm][:, perm].tocsc()
    B.sort_indices()
    n = B.shape[0]
    Ap, Ai = B.indptr.astype(np.int64), B.indices.astype(np.int64)
    parent = _fallback.etree(n, Ap, Ai)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(_fallback.column_counts(n, Ap, Ai, parent), out=Lp[1:])
    Li, Lx, _ = _fallback.cholesky_numeric(n, Ap, Ai, B.data, parent, Lp)
    rhs = rng.standard_normal(n)

    def solve(mod):
        def run():
            y = rhs.copy()
            mod.cholesky_solve(n, Lp, Li, Lx, y)
            return y
        return run

    return [
        ("phi matern nu=1.25 (2e5)", lambda m: phi(m, gen)),
        ("phi matern nu=1.5 (2e5)", lambda m: phi(m, half)),
        ("kernel_block 1500x1200 nu=1.25", lambda m: block(m, gen)),
        ("kernel_block_sym 1500 nu=1.5", lambda m: block_sym(m, half)),
        ("kernel_matvec 1500 nu=1.25", lambda m: matvec(m, gen)),
        ("etree 3600", lambda m: (lambda: m.etree(n, Ap, Ai))),
        ("column_counts 3600", lambda m: (lambda: m.column_counts(n, Ap, Ai, parent))),
        ("cholesky_numeric 3600", lambda m: (lambda: m.cholesky_numeric(n, Ap, Ai, B.data, parent, Lp)[1])),
        ("cholesky_solve 3600", solve),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled core not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':34s} {'cython s':>10s} {'python s':>10s} {'speedup':>8s} {'rel diff':>9s}")
    for name, make in cases(rng):
        tc, oc = best_time(make(_core), args.repeat)
        tp, op = best_time(make(_fallback), args.repeat)
        diff = rel_diff(oc, op)
        rows.append((name, tc, tp, tp / tc, diff))
        print(f"{name:34s} {tc:10.4f} {tp:10.4f} {tp / tc:8.1f} {diff:9.1e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "cython_s", "python_s", "speedup", "rel_diff"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
