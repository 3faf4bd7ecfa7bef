"""Orthonormal multi-level basis adapted to a partition tree and a
polynomial space.

Notation: ``M`` is the N x p trend design matrix, ``Mt`` the N x p~
accuracy design matrix (``p~ >= p``).  The construction sweeps the tree from
the deepest level to the root.  In each cell the incoming orthonormal
vectors ``V`` (unit vectors at a leaf, the children's scaling vectors
otherwise) are split by an SVD of their moments: the part with vanishing
moments against ``Mt`` becomes the cell's detail vectors ``psi``, the rest
are scaling vectors ``phi`` passed to the parent.  At the root a last split
against ``M`` yields the coarsest details ``W_{-1}`` and the trend block
``L``.  Stacking ``P = [W; L]`` gives an orthogonal N x N matrix with
``W M = 0``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .index_sets import BASE_KINDS, MultiIndexSet, build_index_set, extend_index_set
from .partition_tree import PartitionTree

RANK_EPS = 1e-10
REORTH_TOL = 1e-12


class RankDeficiencyError(ValueError):
    def __init__(self, msg, columns=()):
        super().__init__(msg)
        self.columns = tuple(columns)


# ---------------------------------------------------------------- design


def monomials(points, exponents: np.ndarray) -> np.ndarray:
    """Evaluate monomials with exponent rows ``exponents`` at ``points``."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    E = np.asarray(exponents, dtype=np.int64)
    N, d = X.shape
    if E.shape[1] != d:
        raise ValueError("exponent and point dimensions differ")
    out = np.ones((N, E.shape[0]))
    if E.size == 0:
        return out
    emax = int(E.max())
    # powers[n][:, k] = x_n ** k, built by repeated multiplication
    powers = np.empty((d, N, emax + 1))
    powers[:, :, 0] = 1.0
    for k in range(1, emax + 1):
        powers[:, :, k] = powers[:, :, k - 1] * X.T
    for j, e in enumerate(E):
        for n in np.flatnonzero(e):
            out[:, j] *= powers[n, :, e[n]]
    return out


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    index_set: MultiIndexSet
    rank: int
    deficient: tuple[int, ...]

    @property
    def full_rank(self) -> bool:
        return self.rank == self.matrix.shape[1]

    def require_full_rank(self) -> "DesignMatrix":
        if not self.full_rank:
            raise RankDeficiencyError(
                f"design matrix has rank {self.rank} < {self.matrix.shape[1]}; "
                f"deficient columns {list(self.deficient)}",
                self.deficient,
            )
        return self


def design_matrix(points, index_set: MultiIndexSet) -> DesignMatrix:
    """Monomials of ``index_set`` at ``points``, with a pivoted-QR rank check."""
    A = monomials(points, index_set.array)
    N, p = A.shape
    if N < p:
        raise RankDeficiencyError(f"{N} points cannot support {p} monomials", range(N, p))
    # column-equilibrated pivoted QR; equilibration does not change rank
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    _, R, piv = sla.qr(A / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(N, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    return DesignMatrix(A, index_set, rank, tuple(sorted(int(c) for c in piv[rank:])))


def trend_vector(x0, index_set: MultiIndexSet) -> np.ndarray:
    """k(x0): the trend monomials at a single new location."""
    return monomials(np.asarray(x0, dtype=float)[None, :], index_set.array)[0]


# ---------------------------------------------------------------- splitting


def local_split(local_vectors: np.ndarray, moment: np.ndarray, eps: float = RANK_EPS):
    """Split orthonormal columns by the SVD of their moment matrix.

    Returns ``(scaling, details)``; the details are combinations of
    ``local_vectors`` whose moments vanish, i.e. span the null space of
    ``moment``.
    """
    V = np.asarray(local_vectors, dtype=float)
    s = V.shape[1]
    if s == 0:
        return V[:, :0].copy(), V[:, :0].copy()
    Mo = np.asarray(moment, dtype=float)
    if Mo.shape[1] != s:
        raise ValueError("moment must have one column per local vector")
    if Mo.shape[0] == 0:
        return V[:, :0].copy(), V.copy()
    _, S, Vt = np.linalg.svd(Mo, full_matrices=True)
    smax = S[0] if S.size else 0.0
    a = int(np.sum(S >= eps * np.sqrt(s) * smax)) if smax > 0 else 0
    R = Vt.T
    return V @ R[:, :a], V @ R[:, a:]


def _range_basis(G: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the column range of ``G``."""
    if G.shape[1] == 0 or G.shape[0] == 0:
        return np.zeros((G.shape[0], 0))
    norms = np.linalg.norm(G, axis=0)
    norms[norms == 0] = 1.0
    U, S, _ = np.linalg.svd(G / norms, full_matrices=False)
    if S.size == 0 or S[0] == 0:
        return np.zeros((G.shape[0], 0))
    r = int(np.sum(S > S[0] * max(G.shape) * np.finfo(float).eps))
    return U[:, :r]


def _local_coords(X: np.ndarray, shift: bool) -> np.ndarray:
    # rescale a cell to the unit box; the monomial span is unchanged because
    # the sets are downward closed (shift) or merely rescaled (no shift)
    if shift:
        lo = X.min(axis=0)
        hi = X.max(axis=0)
        c = 0.5 * (lo + hi)
        h = 0.5 * (hi - lo)
        h[h == 0] = 1.0
        return (X - c) / h
    h = np.abs(X).max(axis=0)
    h[h == 0] = 1.0
    return X / h


def _reorthonormalize(phi: np.ndarray, psi: np.ndarray):
    B = np.hstack([phi, psi])
    if B.shape[1] == 0:
        return phi, psi, False
    err = np.abs(B.T @ B - np.eye(B.shape[1])).max()
    if err <= REORTH_TOL:
        return phi, psi, False
    # modified Gram-Schmidt, scaling block first so its span is kept
    Q = B.copy()
    for j in range(Q.shape[1]):
        for _ in range(2):
            for i in range(j):
                Q[:, j] -= (Q[:, i] @ Q[:, j]) * Q[:, i]
        Q[:, j] /= np.linalg.norm(Q[:, j])
    a = phi.shape[1]
    return Q[:, :a], Q[:, a:], True


# ---------------------------------------------------------------- basis


@dataclass
class CellBlock:
    """Detail vectors of one cell: ``psi`` is s x k over ``indices``."""

    level: int
    node: int
    indices: np.ndarray
    psi: np.ndarray
    row0: int

    @property
    def k(self) -> int:
        return self.psi.shape[1]


@dataclass
class MultiLevelBasis:
    N: int
    p: int
    p_tilde: int
    t: int
    blocks: dict[int, list[CellBlock]]
    L: np.ndarray
    trend_set: Optional[MultiIndexSet] = None
    accuracy_set: Optional[MultiIndexSet] = None
    flops: int = 0
    reorthogonalized: int = 0
    W: sp.csr_matrix = field(init=False, repr=False)
    level_offsets: dict[int, tuple[int, int]] = field(init=False)
    row_level: np.ndarray = field(init=False, repr=False)
    row_cell: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows, cols, vals = [], [], []
        offsets = {}
        row_level, row_cell = [], []
        r = 0
        for q in self.level_order:
            r0 = r
            for b in self.blocks.get(q, []):
                b.row0 = r
                s, k = b.psi.shape
                rows.append(np.repeat(np.arange(r, r + k), s))
                cols.append(np.tile(b.indices, k))
                vals.append(b.psi.T.ravel())
                row_level.extend([q] * k)
                row_cell.extend([b.node] * k)
                r += k
            offsets[q] = (r0, r)
        n_rows = r
        if rows:
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
        self.W = sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, self.N))
        self.W.sum_duplicates()
        self.level_offsets = offsets
        self.row_level = np.array(row_level, dtype=np.int64)
        self.row_cell = np.array(row_cell, dtype=np.int64)

    @property
    def level_order(self) -> list[int]:
        """Levels in row order: t, t-1, ..., 0, -1."""
        return list(range(self.t, -2, -1))

    @property
    def n_details(self) -> int:
        return self.W.shape[0]

    def rows_in_level(self, q: int) -> int:
        a, b = self.level_offsets[q]
        return b - a

    def partial_dim(self, n: int) -> int:
        """Number of rows in levels t..n."""
        if not -1 <= n <= self.t:
            raise ValueError(f"level {n} outside [-1, {self.t}]")
        return self.level_offsets[n][1]

    def dense_P(self) -> np.ndarray:
        return np.vstack([self.W.toarray(), self.L])

    def support_sizes(self) -> dict[int, int]:
        """Largest support of any vector per level."""
        return {q: max((b.indices.size for b in self.blocks.get(q, []) if b.k), default=0)
                for q in self.level_order}

    def save(self, path) -> None:
        save_basis(self, path)


def _accuracy_set(trend: MultiIndexSet, a: int, extended: bool) -> MultiIndexSet:
    if a == 0 and not extended:
        return trend
    base_kind = trend.kind if trend.kind in BASE_KINDS else trend.kind[len("Extended"):]
    acc = build_index_set(base_kind, trend.d, trend.w + a)
    if extended:
        acc = extend_index_set(acc)
    return acc


def build_basis(tree: PartitionTree, points, trend_set: MultiIndexSet, accuracy_offset: int = 0,
                extended: bool = False, accuracy_set: Optional[MultiIndexSet] = None,
                allow_rank_deficient: bool = False) -> MultiLevelBasis:
    """Bottom-up construction of the multi-level basis.

    With ``allow_rank_deficient`` a trend design of numerical rank r < p
    (e.g. monomials restricted to a sphere) is accepted; the basis then
    has N - r detail vectors and ``L`` has r rows spanning the trend range.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N = X.shape[0]
    if tree.N != N:
        raise ValueError("tree and points disagree on N")
    if accuracy_offset < 0:
        raise ValueError("accuracy offset must be non-negative")
    acc = accuracy_set if accuracy_set is not None else _accuracy_set(trend_set, accuracy_offset, extended)
    if not set(trend_set.indices) <= set(acc.indices):
        raise ValueError("the accuracy set must contain the trend set")
    shift = acc.kind in BASE_KINDS
    E_acc = acc.array
    p, p_tilde = len(trend_set), len(acc)

    M = design_matrix(X, trend_set)
    if allow_rank_deficient:
        p = M.rank
    else:
        M.require_full_rank()

    t = tree.t
    blocks: dict[int, list[CellBlock]] = {q: [] for q in range(t, -2, -1)}
    scaling: dict[int, np.ndarray] = {}
    flops = 0
    reorth = 0

    for q in range(t, -1, -1):
        for node in tree.levels[q]:
            idx = tree.indices(node)
            s = idx.size
            if tree.is_leaf(node):
                V = np.eye(s)
            else:
                l, r = int(tree.left[node]), int(tree.right[node])
                Pl, Pr = scaling.pop(l), scaling.pop(r)
                V = sla.block_diag(Pl, Pr)
            G = monomials(_local_coords(X[idx], shift), E_acc)
            Q = _range_basis(G)
            moment = Q.T @ V
            flops += 2 * s * V.shape[1] * (Q.shape[1] + p_tilde)
            phi, psi = local_split(V, moment)
            phi, psi, redone = _reorthonormalize(phi, psi)
            reorth += int(redone)
            scaling[int(node)] = phi
            blocks[q].append(CellBlock(q, int(node), idx, psi, 0))

    # final split of the root scaling vectors against the trend space
    root_idx = tree.indices(0)
    phi_root = scaling.pop(0)
    Qm = _range_basis(monomials(_local_coords(X[root_idx], trend_set.kind in BASE_KINDS), trend_set.array))
    if Qm.shape[1] < p:
        raise RankDeficiencyError(f"trend space has numerical rank {Qm.shape[1]} < {p}")
    lphi, lpsi = local_split(phi_root, Qm.T @ phi_root)
    lphi, lpsi, redone = _reorthonormalize(lphi, lpsi)
    reorth += int(redone)
    if lphi.shape[1] != p:
        raise RankDeficiencyError(
            f"root scaling vectors capture {lphi.shape[1]} of {p} trend directions"
        )
    blocks[-1].append(CellBlock(-1, 0, root_idx, lpsi, 0))
    L = np.zeros((p, N))
    L[:, root_idx] = lphi.T

    return MultiLevelBasis(N, p, p_tilde, t, blocks, L, trend_set, acc, flops, reorth)


# ---------------------------------------------------------------- application


def apply_W(basis: MultiLevelBasis, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != basis.N:
        raise ValueError(f"expected length {basis.N}, got {v.shape[0]}")
    return basis.W @ v


def apply_WT(basis: MultiLevelBasis, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[0] != basis.n_details:
        raise ValueError(f"expected length {basis.n_details}, got {u.shape[0]}")
    return basis.W.T @ u


def apply_L(basis: MultiLevelBasis, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != basis.N:
        raise ValueError(f"expected length {basis.N}, got {v.shape[0]}")
    return basis.L @ v


def partial_transform(basis: MultiLevelBasis, z, n: int) -> np.ndarray:
    """Coefficients of ``z`` on levels t..n, finest first."""
    m = basis.partial_dim(n)
    return apply_W(basis, z)[:m]


# ---------------------------------------------------------------- persistence

_MAGIC = b"MLKB"
_VERSION = 1
_TREND_LEVEL = -2


def save_basis(basis: MultiLevelBasis, path) -> None:
    """Binary container: header then one record per row (details, then L)."""
    levels = basis.level_order
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I5q", _VERSION, basis.N, basis.p, basis.p_tilde, basis.t, len(levels)))
        fh.write(np.array([basis.rows_in_level(q) for q in levels], dtype="<i8").tobytes())
        for q in levels:
            for b in basis.blocks[q]:
                for j in range(b.k):
                    fh.write(struct.pack("<iqq", q, b.node, b.indices.size))
                    fh.write(b.indices.astype("<i8").tobytes())
                    fh.write(b.psi[:, j].astype("<f8").tobytes())
        full = np.arange(basis.N, dtype="<i8")
        for j in range(basis.p):
            fh.write(struct.pack("<iqq", _TREND_LEVEL, 0, basis.N))
            fh.write(full.tobytes())
            fh.write(basis.L[j].astype("<f8").tobytes())


def load_basis(path) -> MultiLevelBasis:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a basis file")
    off = 4
    version, N, p, p_tilde, t, nlev = struct.unpack_from("<I5q", data, off)
    if version != _VERSION:
        raise ValueError(f"unsupported basis file version {version}")
    off += struct.calcsize("<I5q")
    counts = np.frombuffer(data, dtype="<i8", count=nlev, offset=off)
    off += 8 * nlev
    rec = struct.calcsize("<iqq")
    cells: dict[tuple[int, int], list] = {}
    order: list[tuple[int, int]] = []
    L = np.zeros((p, N))
    lrow = 0
    for _ in range(int(counts.sum()) + p):
        q, node, nnz = struct.unpack_from("<iqq", data, off)
        off += rec
        idx = np.frombuffer(data, dtype="<i8", count=nnz, offset=off).astype(np.int64)
        off += 8 * nnz
        val = np.frombuffer(data, dtype="<f8", count=nnz, offset=off).astype(float)
        off += 8 * nnz
        if q == _TREND_LEVEL:
            L[lrow, idx] = val
            lrow += 1
            continue
        key = (q, node)
        if key not in cells:
            cells[key] = [idx, []]
            order.append(key)
        cells[key][1].append(val)
    blocks: dict[int, list[CellBlock]] = {q: [] for q in range(t, -2, -1)}
    for key in order:
        idx, cols = cells[key]
        blocks[key[0]].append(CellBlock(key[0], key[1], idx, np.column_stack(cols), 0))
    return MultiLevelBasis(N, p, p_tilde, t, blocks, L)
