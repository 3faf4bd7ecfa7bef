import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlkrig.index_sets import (CardinalityError, build_index_set, collocation_count_bounds, eval_monomial,
                               extend_index_set, satisfies, smolyak_abscissas, smolyak_level)


@pytest.mark.parametrize("kind,d,w,card", [
    ("TD", 3, 7, 120),
    ("TD", 3, 4, 35),
    ("HC", 50, 4, 1376),
    ("HC", 50, 5, 1426),
])
def test_published_cardinalities(kind, d, w, card):
    assert len(build_index_set(kind, d, w)) == card


@pytest.mark.parametrize("kind", ["TP", "TD", "SM", "HC"])
def test_level_zero_is_constant(kind):
    assert build_index_set(kind, 4, 0).indices == ((0, 0, 0, 0),)


def test_extend_examples():
    assert extend_index_set(build_index_set("TD", 2, 0)).indices == ((0, 0),)
    ext = extend_index_set(build_index_set("TD", 2, 1))
    assert set(ext.indices) == {(0, 0), (1, 0), (0, 1), (2, 0), (0, 2)}
    assert len(ext) == 5


def test_extend_is_sorted_and_bounded():
    base = build_index_set("SM", 3, 3)
    ext = extend_index_set(base)
    assert len(ext) <= 2 * len(base)
    assert set(base.indices) <= set(ext.indices)
    assert list(ext.indices) == sorted(ext.indices, key=lambda p: (sum(p), tuple(-v for v in p)))


def test_eval_monomial():
    assert eval_monomial((0, 0, 0), (3.0, -1.0, 0.0)) == 1.0
    assert eval_monomial((2, 1), (3.0, -2.0)) == -18.0
    assert eval_monomial((1, 0, 3), (0.5, 7.0, 2.0)) == 4.0


def test_smolyak_abscissas():
    np.testing.assert_array_equal(smolyak_abscissas(1), [0.0])
    np.testing.assert_allclose(smolyak_abscissas(2), [-1.0, 0.0, 1.0], atol=1e-15)
    h = math.sqrt(2) / 2
    np.testing.assert_allclose(smolyak_abscissas(3), [-1.0, -h, 0.0, h, 1.0], atol=1e-15)
    for i in range(1, 6):
        a, b = smolyak_abscissas(i), smolyak_abscissas(i + 1)
        assert all(np.min(np.abs(b - x)) < 1e-14 for x in a)


def test_collocation_counts():
    assert collocation_count_bounds(1, 0) == (0, 1)
    assert collocation_count_bounds(3, 2)[0] == 9
    for d in range(1, 61):
        for w in range(11):
            lo, hi = collocation_count_bounds(d, w)
            assert lo <= hi


def test_smolyak_level_function():
    assert [smolyak_level(p) for p in range(6)] == [0, 1, 1, 2, 2, 3]


@pytest.mark.parametrize("kind", ["TP", "TD", "SM", "HC"])
@pytest.mark.parametrize("d,w", [(1, 6), (2, 5), (3, 4), (4, 3)])
def test_predicate_brute_force(kind, d, w):
    S = build_index_set(kind, d, w)
    members = set(S.indices)
    assert len(members) == len(S)
    for p in itertools.product(range(w + 1), repeat=d):
        assert (p in members) == satisfies(kind, p, w)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 10), w=st.integers(0, 8))
def test_td_cardinality_is_binomial(d, w):
    assert len(build_index_set("TD", d, w)) == math.comb(d + w, w)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(["TP", "TD", "SM", "HC"]), d=st.integers(1, 4), w=st.integers(0, 5))
def test_nested_in_w(kind, d, w):
    assert set(build_index_set(kind, d, w).indices) <= set(build_index_set(kind, d, w + 1).indices)


@pytest.mark.parametrize("d", [5, 6, 8])
def test_sm_hc_grow_slower_than_td(d):
    # compared at matched maximal univariate degree m = 2^(w-1):
    # SM level w, HC level m + 1, TD level m
    def sizes(w):
        m = 2 ** (w - 1)
        return (len(build_index_set("SM", d, w)), len(build_index_set("HC", d, m + 1)),
                len(build_index_set("TD", d, m)))

    (sm3, hc3, td3), (sm4, hc4, td4) = sizes(3), sizes(4)
    assert sm4 / sm3 < td4 / td3
    assert hc4 / hc3 < td4 / td3
    assert hc3 < td3 and hc4 < td4 and sm4 < td4


def test_cap_rejects_large_sets():
    with pytest.raises(CardinalityError):
        build_index_set("TD", 10, 8, cap=1000)


def test_json_round_trip():
    S = build_index_set("HC", 4, 6)
    obj = json.loads(S.to_json())
    assert obj["kind"] == "HC" and obj["d"] == 4 and obj["w"] == 6
    assert type(S).from_json(S.to_json()) == S


def test_hc_large_d_is_fast():
    import time
    t0 = time.perf_counter()
    build_index_set("HC", 50, 5)
    assert time.perf_counter() - t0 < 1.0
