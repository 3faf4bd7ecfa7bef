"""NumPy implementations mirroring the compiled ``_core`` module.

Used when the extension is not built, or when ``MLKRIG_PURE=1``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import kv

MATERN, MATERN_HALF, GAUSSIAN = 0, 1, 2

_ROW_CHUNK = 256


def phi_of_scaled(z, family, nu, lognorm, coef):
    z = np.asarray(z, dtype=float)
    if family == GAUSSIAN:
        return np.exp(-0.5 * z * z)
    out = np.ones_like(z)
    m = z >= 1e-9
    zm = z[m]
    if family == MATERN_HALF:
        acc = np.zeros_like(zm)
        for c in coef:
            acc = acc * zm + c
        out[m] = np.exp(-zm) * acc
        return out
    with np.errstate(over="ignore", invalid="ignore"):
        val = kv(nu, zm)
        res = np.exp(lognorm + nu * np.log(zm)) * val
    bad = ~np.isfinite(val)
    if bad.any():
        res[bad] = 1.0 - zm[bad] ** 2 / (4.0 * (nu - 1.0))
    out[m] = res
    return out


def _scaled_dist(xa, xb, weights, scale):
    # explicit differences rather than the |a|^2+|b|^2-2ab trick, so that
    # values agree with the compiled loop to rounding
    diff = xa[:, None, :] - xb[None, :, :]
    return scale * np.sqrt(np.einsum("ijk,k->ij", diff * diff, weights))


def kernel_block(xa, xb, weights, scale, family, nu, lognorm, coef):
    out = np.empty((xa.shape[0], xb.shape[0]))
    for s in range(0, xa.shape[0], _ROW_CHUNK):
        z = _scaled_dist(xa[s:s + _ROW_CHUNK], xb, weights, scale)
        out[s:s + _ROW_CHUNK] = phi_of_scaled(z.ravel(), family, nu, lognorm, coef).reshape(z.shape)
    return out


def kernel_block_sym(x, weights, scale, family, nu, lognorm, coef):
    return kernel_block(x, x, weights, scale, family, nu, lognorm, coef)


def kernel_matvec(x, v, weights, scale, family, nu, lognorm, coef):
    out = np.empty(x.shape[0])
    for s in range(0, x.shape[0], _ROW_CHUNK):
        blk = kernel_block(x[s:s + _ROW_CHUNK], x, weights, scale, family, nu, lognorm, coef)
        out[s:s + _ROW_CHUNK] = blk @ v
    return out


def etree(n, Ap, Ai):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for i in Ai[Ap[k]:Ap[k + 1]]:
            i = int(i)
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = int(inext)
    return parent


def _ereach(n, k, Ap, Ai, parent, mark):
    """Row pattern of L(k, :k) in topological order."""
    mark[k] = k
    out: list[int] = []
    for i in Ai[Ap[k]:Ap[k + 1]]:
        i = int(i)
        if i > k:
            continue
        path = []
        while mark[i] != k:
            path.append(i)
            mark[i] = k
            i = int(parent[i])
        # each new path goes on top of the stack, as in CSparse
        out = path + out
    return out


def column_counts(n, Ap, Ai, parent):
    counts = np.ones(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for j in _ereach(n, k, Ap, Ai, parent, mark):
            counts[j] += 1
    return counts


def cholesky_numeric(n, Ap, Ai, Ax, parent, Lp):
    nnz = int(Lp[n])
    Li = np.zeros(nnz, dtype=np.int64)
    Lx = np.zeros(nnz)
    x = np.zeros(n)
    c = np.array(Lp[:n], dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        pattern = _ereach(n, k, Ap, Ai, parent, mark)
        lo, hi = Ap[k], Ap[k + 1]
        rows = Ai[lo:hi]
        keep = rows <= k
        x[rows[keep]] = Ax[lo:hi][keep]
        d = x[k]
        x[k] = 0.0
        for i in pattern:
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            a, b = Lp[i] + 1, c[i]
            if b > a:
                x[Li[a:b]] -= Lx[a:b] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > 0.0 or not np.isfinite(d):
            return Li, Lx, k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return Li, Lx, -1


def cholesky_solve(n, Lp, Li, Lx, x):
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        a, b = Lp[j] + 1, Lp[j + 1]
        if b > a:
            x[Li[a:b]] -= Lx[a:b] * x[j]
    for j in range(n - 1, -1, -1):
        a, b = Lp[j] + 1, Lp[j + 1]
        acc = x[j] - (Lx[a:b] @ x[Li[a:b]] if b > a else 0.0)
        x[j] = acc / Lx[Lp[j]]
