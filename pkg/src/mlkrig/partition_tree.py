"""Binary space-partition trees over observation locations.

Each internal node projects its points on a split vector ``v`` (a random
unit vector for the RP rule, a coordinate axis for the kD rule) and sends
the lower ``ceil(s/2)`` points left.  A node is a leaf iff it holds fewer
than ``n0`` points.  Node ids follow preorder (node, left subtree, right
subtree) and every node owns a contiguous range of the permutation array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

RULES = ("RP", "kD")


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    depth: int
    v: np.ndarray
    threshold: float
    children: Optional[tuple[int, int]]
    point_range: tuple[int, int]

    @property
    def size(self) -> int:
        return self.point_range[1] - self.point_range[0]

    @property
    def is_leaf(self) -> bool:
        return self.children is None


class PartitionTree:
    """Immutable array-backed tree; build it with :func:`build_tree`."""

    def __init__(self, points, n0, rule, seed, depth, left, right, parent, start, end,
                 threshold, vectors, perm):
        self.points = points
        self.n0 = int(n0)
        self.rule = rule
        self.seed = seed
        self.depth = depth
        self.left = left
        self.right = right
        self.parent = parent
        self.start = start
        self.end = end
        self.threshold = threshold
        self.vectors = vectors
        self.permutation = perm
        for a in (depth, left, right, parent, start, end, threshold, vectors, perm):
            a.setflags(write=False)
        self.t = int(depth.max()) if depth.size else 0
        self.levels = [np.flatnonzero(depth == q) for q in range(self.t + 1)]

    @property
    def n_nodes(self) -> int:
        return int(self.depth.size)

    @property
    def N(self) -> int:
        return int(self.permutation.size)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def node(self, i: int) -> TreeNode:
        ch = None if self.left[i] < 0 else (int(self.left[i]), int(self.right[i]))
        return TreeNode(int(i), int(self.depth[i]), self.vectors[i], float(self.threshold[i]), ch,
                        (int(self.start[i]), int(self.end[i])))

    @property
    def nodes(self) -> list[TreeNode]:
        return [self.node(i) for i in range(self.n_nodes)]

    def indices(self, node: int) -> np.ndarray:
        """Original observation indices owned by ``node``."""
        return self.permutation[self.start[node]:self.end[node]]

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def stats(self) -> dict:
        sizes = (self.end - self.start)
        leaves = self.leaves()
        return {
            "N": self.N,
            "n0": self.n0,
            "rule": self.rule,
            "seed": self.seed,
            "t": self.t,
            "n_nodes": self.n_nodes,
            "n_leaves": int(leaves.size),
            "cells_per_depth": [int(lv.size) for lv in self.levels],
            "leaf_size_min": int(sizes[leaves].min()),
            "leaf_size_max": int(sizes[leaves].max()),
            "leaf_depths": sorted({int(q) for q in self.depth[leaves]}),
        }


def build_tree(points, n0: int, rule: str = "RP", seed: int = 0) -> PartitionTree:
    """Recursive median splitting of ``points`` into a binary tree."""
    X = np.ascontiguousarray(np.asarray(points, dtype=float))
    if X.ndim == 1:
        X = X[:, None]
    N, d = X.shape
    if N < 1:
        raise ValueError("need at least one point")
    if n0 < 2:
        raise ValueError("n0 must be >= 2")
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}")
    if np.unique(X, axis=0).shape[0] != N:
        raise ValueError("observation locations must be distinct")

    rng = np.random.Generator(np.random.PCG64(seed))
    perm = np.arange(N, dtype=np.int64)
    depth, left, right, parent, start, end, thr, vecs = [], [], [], [], [], [], [], []

    # stack entries: (parent id, depth, start, end, slot) where slot tells
    # the parent which child pointer to fill
    stack = [(-1, 0, 0, N, None)]
    while stack:
        par, q, lo, hi, slot = stack.pop()
        nid = len(depth)
        depth.append(q)
        parent.append(par)
        start.append(lo)
        end.append(hi)
        left.append(-1)
        right.append(-1)
        if par >= 0:
            (left if slot == 0 else right)[par] = nid
        s = hi - lo
        if s < n0:
            thr.append(np.nan)
            vecs.append(np.zeros(d))
            continue
        if rule == "RP":
            v = rng.standard_normal(d)
            v /= np.linalg.norm(v)
        else:
            v = np.zeros(d)
            v[q % d] = 1.0
        idx = perm[lo:hi]
        proj = X[idx] @ v
        order = np.argsort(proj, kind="stable")
        perm[lo:hi] = idx[order]
        k = math.ceil(s / 2)
        thr.append(float(proj[order[k - 1]]))
        vecs.append(v)
        # right pushed first so the left subtree gets the next ids
        stack.append((nid, q + 1, lo + k, hi, 1))
        stack.append((nid, q + 1, lo, lo + k, 0))

    return PartitionTree(
        X, n0, rule, seed,
        np.array(depth, dtype=np.int64), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(parent, dtype=np.int64),
        np.array(start, dtype=np.int64), np.array(end, dtype=np.int64),
        np.array(thr), np.array(vecs).reshape(len(depth), d), perm,
    )


def search_cells(tree: PartitionTree, K, target_depth: int, tau: float,
                 prune: str = "left") -> np.ndarray:
    """Cells at ``target_depth`` that may lie within ``tau`` of the points ``K``.

    At an internal node the descent goes left only when every point of ``K``
    projects strictly more than ``tau`` below the threshold.  With
    ``prune="both"`` the mirrored test also allows a right-only descent.
    Returns sorted node ids.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim == 1:
        K = K[None, :]
    if K.shape[0] == 0:
        raise ValueError("K must be non-empty")
    if not 0 <= target_depth <= tree.t:
        raise ValueError(f"target depth {target_depth} outside [0, {tree.t}]")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if prune not in ("left", "both"):
        raise ValueError("prune must be 'left' or 'both'")
    found = []
    stack = [0]
    while stack:
        node = stack.pop()
        if tree.depth[node] == target_depth:
            found.append(node)
            continue
        if tree.left[node] < 0:
            continue
        proj = K @ tree.vectors[node]
        th = tree.threshold[node]
        if np.all(proj + tau < th):
            stack.append(tree.left[node])
        elif prune == "both" and np.all(proj - tau > th):
            stack.append(tree.right[node])
        else:
            stack.append(tree.right[node])
            stack.append(tree.left[node])
    return np.array(sorted(found), dtype=np.int64)
