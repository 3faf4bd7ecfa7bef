import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlkrig.field_synthesis import sample_points
from mlkrig.index_sets import build_index_set, extend_index_set
from mlkrig.multilevel_basis import (RankDeficiencyError, apply_L, apply_W, apply_WT, build_basis, design_matrix,
                                     load_basis, local_split, monomials, partial_transform, trend_vector)
from mlkrig.partition_tree import build_tree

from conftest import make_geometry


def test_design_matrix_examples(rng):
    X = rng.uniform(-1, 1, (10, 3))
    D = design_matrix(X, build_index_set("TD", 3, 0))
    np.testing.assert_array_equal(D.matrix, np.ones((10, 1)))
    D = design_matrix(np.array([[0.0], [1.0], [2.0]]), build_index_set("TD", 1, 1))
    np.testing.assert_array_equal(D.matrix, [[1, 0], [1, 1], [1, 2]])
    assert D.rank == 2
    D = design_matrix(rng.uniform(-1, 1, (200, 5)), build_index_set("TD", 5, 2))
    assert D.rank == 21 == math.comb(7, 2)


def test_design_matrix_reports_deficiency():
    X = sample_points("sphere", 300, 3, 0)
    D = design_matrix(X, build_index_set("TD", 3, 2))
    assert D.rank == 9 and len(D.deficient) == 1
    with pytest.raises(RankDeficiencyError) as e:
        D.require_full_rank()
    assert len(e.value.columns) == 1


def test_trend_vector_is_one_row():
    S = build_index_set("TD", 2, 2)
    np.testing.assert_allclose(trend_vector(np.array([2.0, 3.0]), S), [1, 2, 3, 4, 6, 9])


def test_local_split_examples(rng):
    V = np.linalg.qr(rng.standard_normal((6, 3)))[0]
    phi, psi = local_split(V, np.zeros((2, 3)))
    assert phi.shape[1] == 0 and psi.shape[1] == 3
    phi, psi = local_split(V, rng.standard_normal((3, 3)))
    assert phi.shape[1] == 3 and psi.shape[1] == 0
    Mo = rng.standard_normal((4, 2)) @ rng.standard_normal((2, 3))
    phi, psi = local_split(V, Mo)
    assert phi.shape[1] == 2 and psi.shape[1] == 1
    coeff = V.T @ psi          # detail in local coordinates
    assert np.max(np.abs(Mo @ coeff)) <= 1e-12
    Q = np.hstack([phi, psi])
    np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-13)
    e_phi, e_psi = local_split(V[:, :0], np.zeros((2, 0)))
    assert e_phi.shape[1] == e_psi.shape[1] == 0


def test_n_equals_p():
    X = sample_points("cube", 6, 2, 0)
    S = build_index_set("TD", 2, 2)
    B = build_basis(build_tree(X, 100, "kD"), X, S)
    assert B.n_details == 0
    M = design_matrix(X, S).matrix
    np.testing.assert_allclose(B.L @ B.L.T, np.eye(6), atol=1e-12)
    # L spans the trend range
    np.testing.assert_allclose(B.L.T @ (B.L @ M), M, atol=1e-10)


def test_haar_like_one_dimensional():
    X = np.sort(sample_points("cube", 64, 1, 0), axis=0)
    S = build_index_set("TD", 1, 0)
    B = build_basis(build_tree(X, 2, "kD"), X, S)
    assert B.n_details == 63
    W = B.W.toarray()
    np.testing.assert_allclose(W.sum(axis=1), 0, atol=1e-12)


@pytest.mark.parametrize("kind,w,rule", [("TD", 2, "kD"), ("HC", 4, "RP"), ("SM", 2, "RP")])
def test_orthonormal_and_vanishing_moments(kind, w, rule):
    X, S, tree, B = make_geometry(N=700, d=4, kind=kind, w=w, rule=rule, seed=5)
    P = B.dense_P()
    assert np.max(np.abs(P @ P.T - np.eye(B.N))) <= 1e-10
    M = design_matrix(X, S).matrix
    assert np.max(np.abs(B.W @ M)) <= 1e-10
    assert B.p + B.n_details == B.N


def test_level_counts_and_support():
    X, S, tree, B = make_geometry(N=1500, d=3, kind="TD", w=2, seed=2)
    pt = B.p_tilde
    for q in range(B.t + 1):
        assert B.rows_in_level(q) <= pt * 2 ** q
        for b in B.blocks[q]:
            assert b.indices.size <= 2 ** (B.t - q + 1) * pt
            # the support lies inside the owning cell
            assert set(b.indices.tolist()) <= set(tree.indices(b.node).tolist())
    assert B.rows_in_level(-1) <= pt - B.p


def test_accuracy_offset_moments():
    X = sample_points("cube", 800, 3, 4)
    S = build_index_set("TD", 3, 1)
    tree = build_tree(X, 2 * len(build_index_set("TD", 3, 3)), "kD")
    B = build_basis(tree, X, S, accuracy_offset=2)
    Ma = design_matrix(X, build_index_set("TD", 3, 3)).matrix
    rows = np.flatnonzero(B.row_level >= 0)
    assert np.max(np.abs(B.W[rows] @ Ma)) <= 1e-9 * np.max(np.abs(Ma))
    assert np.max(np.abs(B.W @ design_matrix(X, S).matrix)) <= 1e-10


def test_extended_basis():
    X = sample_points("cube", 600, 2, 4)
    S = build_index_set("TD", 2, 2)
    tree = build_tree(X, 2 * len(extend_index_set(S)), "kD")
    B = build_basis(tree, X, S, extended=True)
    assert B.p_tilde == len(extend_index_set(S))
    Mext = monomials(X, extend_index_set(S).array)
    rows = np.flatnonzero(B.row_level >= 0)
    assert np.max(np.abs(B.W[rows] @ Mext)) <= 1e-9 * np.max(np.abs(Mext))


def test_apply_operators(rng):
    X, S, tree, B = make_geometry(N=2000, d=3, seed=9)
    v = rng.standard_normal(B.N)
    assert np.all(apply_W(B, np.zeros(B.N)) == 0)
    M = design_matrix(X, S).matrix
    assert np.max(np.abs(apply_W(B, M @ rng.standard_normal(B.p)))) <= 1e-10 * 10
    back = apply_WT(B, apply_W(B, v)) + B.L.T @ apply_L(B, v)
    assert np.linalg.norm(back - v) <= 1e-10 * np.linalg.norm(v)
    with pytest.raises(ValueError):
        apply_W(B, v[:-1])
    with pytest.raises(ValueError):
        apply_WT(B, v)


def test_partial_transform_lengths(small):
    X, S, tree, B, k, Z = small
    np.testing.assert_array_equal(partial_transform(B, Z, -1), apply_W(B, Z))
    assert partial_transform(B, Z, B.t).size == B.rows_in_level(B.t)
    sizes = [partial_transform(B, Z, n).size for n in range(B.t, -2, -1)]
    assert sizes == [sum(B.rows_in_level(q) for q in range(n, B.t + 1)) for n in range(B.t, -2, -1)]
    assert all(a < b for a, b in zip(sizes, sizes[1:]) if b > a) and sizes[-1] == B.n_details


def test_save_load_bit_exact(tmp_path, small):
    X, S, tree, B, k, Z = small
    path = tmp_path / "b.bin"
    B.save(path)
    B2 = load_basis(path)
    assert (B2.N, B2.p, B2.p_tilde, B2.t) == (B.N, B.p, B.p_tilde, B.t)
    assert (B2.W != B.W).nnz == 0
    np.testing.assert_array_equal(B2.L, B.L)
    B2.save(tmp_path / "c.bin")
    assert path.read_bytes() == (tmp_path / "c.bin").read_bytes()


def test_rank_deficient_trend_on_sphere():
    X = sample_points("sphere", 500, 3, 0)
    S = build_index_set("TD", 3, 4)
    tree = build_tree(X, 70, "kD")
    with pytest.raises(RankDeficiencyError):
        build_basis(tree, X, S)
    B = build_basis(tree, X, S, allow_rank_deficient=True)
    assert B.p == 25
    assert np.max(np.abs(B.W @ design_matrix(X, S).matrix)) <= 1e-9


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), d=st.integers(1, 4), w=st.integers(0, 2), rule=st.sampled_from(["RP", "kD"]))
def test_orthonormal_property(seed, d, w, rule):
    X = sample_points("cube", 120, d, seed)
    S = build_index_set("TD", d, w)
    B = build_basis(build_tree(X, 2 * len(S), rule, seed), X, S)
    P = B.dense_P()
    assert np.max(np.abs(P @ P.T - np.eye(B.N))) <= 1e-10
    assert np.max(np.abs(B.W @ design_matrix(X, S).matrix)) <= 1e-10
