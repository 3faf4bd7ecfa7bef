"""Multi-level covariance matrices ``C_W = W C W^T`` and their truncation.

The sparse version keeps, for every pair of levels ``(i, j)`` with both
levels at least 1, only the cell pairs found by a tree search of radius

    tau_ij = tau * 2**(t - (i + j) / 2)

around the source cell's points.  Pairs involving the two coarsest levels
(0 and -1) are always kept.  The retained pattern depends on geometry only,
so it is computed once and re-filled for every set of kernel parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .kernels import DENSE_CAP, KernelSpec, cov_matrix
from .multilevel_basis import CellBlock, MultiLevelBasis
from .partition_tree import PartitionTree, search_cells

INF = float("inf")


def tau_schedule(tau: float, t: int, i: int, j: int) -> float:
    """Level-pair radius ``tau * 2**(t - (i+j)/2)``."""
    if tau == INF:
        return INF
    return tau * 2.0 ** (t - (i + j) / 2.0)


def assemble_dense_CW(basis: MultiLevelBasis, kernel: KernelSpec, points,
                      cap: int = DENSE_CAP, C: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact ``W C W^T`` by dense products (verification oracle)."""
    X = np.asarray(points, dtype=float)
    m = basis.n_details
    if m == 0:
        return np.zeros((0, 0))
    if C is None:
        C = cov_matrix(X, X, kernel, cap=cap)
    WC = basis.W @ C                       # m x N
    out = np.asarray((basis.W @ WC.T).T)   # W (W C)^T = W C W^T since C = C^T
    return 0.5 * (out + out.T)


@dataclass
class BlockSparseMatrix:
    """Symmetric sparse matrix over the detail coefficients of levels t..n."""

    matrix: sp.csr_matrix
    t: int
    n: int
    level_offsets: dict[int, tuple[int, int]]
    tau: float
    flops: dict[tuple[int, int], int] = field(default_factory=dict)
    kernel_evals: int = 0

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    @property
    def density(self) -> float:
        return self.nnz / float(self.dim * self.dim) if self.dim else 0.0

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def block(self, i: int, j: int) -> sp.csr_matrix:
        a, b = self.level_offsets[i]
        c, d = self.level_offsets[j]
        return self.matrix[a:b, c:d]

    def save(self, path) -> None:
        save_block_sparse(self, path)

    def to_matrix_market(self, path) -> None:
        scipy.io.mmwrite(str(path), self.matrix.tocoo(), symmetry="symmetric")


@dataclass
class _SourcePlan:
    block: CellBlock
    partners: list[CellBlock]
    cols: np.ndarray          # concatenated partner point indices


class SparsityPattern:
    """Retained cell pairs for given ``(tau, n)``; reusable across kernels."""

    def __init__(self, basis: MultiLevelBasis, tree: PartitionTree, points, tau: float,
                 n: int = -1, prune: str = "left"):
        if tau < 0:
            raise ValueError("tau must be non-negative")
        self.basis = basis
        self.tree = tree
        self.points = np.ascontiguousarray(np.asarray(points, dtype=float))
        self.tau = float(tau)
        self.n = int(n)
        self.prune = prune
        self.dim = basis.partial_dim(n)
        t = basis.t
        levels = [q for q in basis.level_order if q >= n]
        by_level = {q: [b for b in basis.blocks.get(q, []) if b.k > 0] for q in levels}
        node_block = {q: {b.node: b for b in by_level[q]} for q in levels}

        pairs: dict[tuple[int, int, int, int], tuple[CellBlock, CellBlock]] = {}
        for i in levels:
            for j in levels:
                if j < i:
                    continue
                for A in by_level[i]:
                    if i >= 1 and j >= 1:
                        hits = search_cells(tree, self.points[A.indices], j,
                                            tau_schedule(self.tau, t, i, j), prune)
                        partners = [node_block[j][h] for h in hits if h in node_block[j]]
                    else:
                        partners = by_level[j]
                    for B in partners:
                        ka, kb = (A, B) if A.row0 <= B.row0 else (B, A)
                        pairs[(ka.level, ka.node, kb.level, kb.node)] = (ka, kb)

        # group by source block in a fixed order for deterministic filling
        plans: dict[tuple[int, int], _SourcePlan] = {}
        for key in sorted(pairs, key=lambda k: (pairs[k][0].row0, pairs[k][1].row0)):
            A, B = pairs[key]
            pk = (A.level, A.node)
            if pk not in plans:
                plans[pk] = _SourcePlan(A, [], np.zeros(0, dtype=np.int64))
            plans[pk].partners.append(B)
        for plan in plans.values():
            plan.cols = np.concatenate([B.indices for B in plan.partners])
        self.plans = list(plans.values())
        self.n_pairs = len(pairs)
        self.kernel_evals = int(sum(p.block.indices.size * p.cols.size for p in self.plans))

        # CSR layout: values are produced pair by pair (upper block, then its
        # mirror) and scattered through a fixed permutation
        rows, cols = [], []
        for plan in self.plans:
            A = plan.block
            ra = A.row0 + np.arange(A.k)
            for B in plan.partners:
                rb = B.row0 + np.arange(B.k)
                rows.append(np.repeat(ra, B.k))
                cols.append(np.tile(rb, A.k))
                if B is not A:
                    rows.append(np.repeat(rb, A.k))
                    cols.append(np.tile(ra, B.k))
        if rows:
            r = np.concatenate(rows)
            c = np.concatenate(cols)
        else:
            r = c = np.zeros(0, dtype=np.int64)
        order = np.lexsort((c, r))
        self._order = order
        self._indices = c[order].astype(np.int32)
        self._indptr = np.searchsorted(r[order], np.arange(self.dim + 1)).astype(np.int32)
        self.nnz = int(r.size)

    @property
    def density(self) -> float:
        return self.nnz / float(self.dim * self.dim) if self.dim else 0.0

    def assemble(self, kernel: KernelSpec, C: Optional[np.ndarray] = None,
                 dense_kernel: Optional[bool] = None) -> BlockSparseMatrix:
        """Fill the pattern with ``psi_A^T C psi_B`` for every retained pair."""
        X = self.points
        N = X.shape[0]
        if dense_kernel is None:
            dense_kernel = C is not None or (self.kernel_evals >= N * N // 2 and N * N <= DENSE_CAP)
        if dense_kernel and C is None:
            C = cov_matrix(X, X, kernel)
        vals = []
        flops: dict[tuple[int, int], int] = {}
        evals = 0
        for plan in self.plans:
            A = plan.block
            if C is not None:
                K = C[A.indices][:, plan.cols]
            else:
                K = cov_matrix(X[A.indices], X[plan.cols], kernel)
                evals += K.size
            T = A.psi.T @ K
            off = 0
            for B in plan.partners:
                sb = B.indices.size
                blk = T[:, off:off + sb] @ B.psi
                off += sb
                if B is A:
                    blk = 0.5 * (blk + blk.T)
                    vals.append(blk.ravel())
                else:
                    vals.append(blk.ravel())
                    vals.append(blk.T.ravel())
                key = (A.level, B.level)
                flops[key] = flops.get(key, 0) + 2 * A.k * A.indices.size * sb + 2 * A.k * sb * B.k
        data = np.concatenate(vals)[self._order] if vals else np.zeros(0)
        mat = sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=(self.dim, self.dim))
        offsets = {q: self.basis.level_offsets[q] for q in self.basis.level_order if q >= self.n}
        return BlockSparseMatrix(mat, self.basis.t, self.n, offsets, self.tau, flops,
                                 evals if C is None else N * (N - 1) // 2)


def assemble_sparse_CW(basis: MultiLevelBasis, tree: PartitionTree, kernel: KernelSpec, points,
                       tau: float, n: int = -1, prune: str = "left") -> BlockSparseMatrix:
    """Truncated ``C_W`` restricted to levels t..n."""
    return SparsityPattern(basis, tree, points, tau, n, prune).assemble(kernel)


def _spectral_norm(E, iters: int = 50, rtol: float = 1e-6, seed: int = 0) -> float:
    m = E.shape[1]
    if m == 0:
        return 0.0
    x = np.random.default_rng(seed).standard_normal(m)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = E.T @ (E @ x)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        new = np.sqrt(ny)
        x = y / ny
        if est > 0 and abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    return float(est)


def truncation_gap(dense_CW, sparse_CW) -> tuple[float, float]:
    """``(max |E|, ||E||_2 estimate)`` for ``E = dense - sparse``."""
    S = sparse_CW.toarray() if hasattr(sparse_CW, "toarray") else np.asarray(sparse_CW)
    D = np.asarray(dense_CW)
    m = S.shape[0]
    E = D[:m, :m] - S
    if E.size == 0:
        return 0.0, 0.0
    return float(np.abs(E).max()), _spectral_norm(E)


# ---------------------------------------------------------------- persistence

_MAGIC = b"MLKS"
_VERSION = 1


def save_block_sparse(M: BlockSparseMatrix, path) -> None:
    """Header, level offsets, then upper-triangle COO triplets per level pair."""
    levels = sorted(M.level_offsets, reverse=True)
    upper = sp.triu(M.matrix).tocoo()
    r, c, v = upper.row.astype(np.int64), upper.col.astype(np.int64), upper.data
    row_lev = np.empty(r.size, dtype=np.int64)
    col_lev = np.empty(c.size, dtype=np.int64)
    for q in levels:
        a, b = M.level_offsets[q]
        row_lev[(r >= a) & (r < b)] = q
        col_lev[(c >= a) & (c < b)] = q
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I3qd", _VERSION, M.t, M.n, M.dim, M.tau))
        fh.write(struct.pack("<q", len(levels)))
        for q in levels:
            a, b = M.level_offsets[q]
            fh.write(struct.pack("<3q", q, a, b))
        groups = [(qi, qj) for qi in levels for qj in levels]
        fh.write(struct.pack("<q", len(groups)))
        for qi, qj in groups:
            m = (row_lev == qi) & (col_lev == qj)
            fh.write(struct.pack("<3q", qi, qj, int(m.sum())))
            fh.write(r[m].astype("<i8").tobytes())
            fh.write(c[m].astype("<i8").tobytes())
            fh.write(v[m].astype("<f8").tobytes())


def load_block_sparse(path) -> BlockSparseMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a block-sparse matrix file")
    off = 4
    version, t, n, dim, tau = struct.unpack_from("<I3qd", data, off)
    if version != _VERSION:
        raise ValueError(f"unsupported version {version}")
    off += struct.calcsize("<I3qd")
    (nlev,) = struct.unpack_from("<q", data, off)
    off += 8
    offsets = {}
    for _ in range(nlev):
        q, a, b = struct.unpack_from("<3q", data, off)
        off += 24
        offsets[q] = (a, b)
    (ngroups,) = struct.unpack_from("<q", data, off)
    off += 8
    rs, cs, vs = [], [], []
    for _ in range(ngroups):
        _, _, cnt = struct.unpack_from("<3q", data, off)
        off += 24
        rs.append(np.frombuffer(data, "<i8", cnt, off))
        off += 8 * cnt
        cs.append(np.frombuffer(data, "<i8", cnt, off))
        off += 8 * cnt
        vs.append(np.frombuffer(data, "<f8", cnt, off))
        off += 8 * cnt
    r = np.concatenate(rs)
    c = np.concatenate(cs)
    v = np.concatenate(vs)
    off_diag = r != c
    rr = np.concatenate([r, c[off_diag]])
    cc = np.concatenate([c, r[off_diag]])
    vv = np.concatenate([v, v[off_diag]])
    mat = sp.csr_matrix((vv, (rr, cc)), shape=(dim, dim))
    return BlockSparseMatrix(mat, t, n, offsets, tau)
