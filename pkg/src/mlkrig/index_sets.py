"""Multivariate polynomial index sets.

A set is a finite collection of multi-indices ``p = (p_1, ..., p_d)``; each
index stands for the monomial ``x_1**p_1 * ... * x_d**p_d``.  Four families
are supported, all downward closed in every coordinate:

======  ==========================================
TP      ``max p_i <= w``
TD      ``sum p_i <= w``
SM      ``sum f(p_i) <= w``, f(0)=0, f(1)=1, f(p)=ceil(log2 p)
HC      ``prod (p_i + 1) <= w``
======  ==========================================

Indices are stored in graded lexicographic order: by total degree, then
descending lexicographic within a degree, so ``(1, 0)`` precedes ``(0, 1)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

BASE_KINDS = ("TP", "TD", "SM", "HC")
EXTENDED_KINDS = ("ExtendedSM", "ExtendedHC", "ExtendedTD")
KINDS = BASE_KINDS + EXTENDED_KINDS

DEFAULT_CAP = 100_000


class CardinalityError(ValueError):
    """Raised when an index set would exceed the configured cap."""


def smolyak_level(p: int) -> int:
    """The level function f with f(0)=0, f(1)=1 and f(p)=ceil(log2 p)."""
    if p < 0:
        raise ValueError("exponent must be non-negative")
    if p <= 1:
        return p
    return (p - 1).bit_length()  # exact ceil(log2 p) for integers


def satisfies(kind: str, p: Sequence[int], w: int) -> bool:
    """Defining predicate of a base family."""
    if kind == "TP":
        return max(p, default=0) <= w
    if kind == "TD":
        return sum(p) <= w
    if kind == "SM":
        return sum(smolyak_level(v) for v in p) <= w
    if kind == "HC":
        return math.prod(v + 1 for v in p) <= max(w, 1)
    raise ValueError(f"unknown index set kind {kind!r}")


def _grlex_key(p: tuple[int, ...]):
    return (sum(p), tuple(-v for v in p))


@dataclass(frozen=True)
class MultiIndexSet:
    kind: str
    d: int
    w: int
    indices: tuple[tuple[int, ...], ...]
    _array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        arr = np.array(self.indices, dtype=np.int64).reshape(len(self.indices), self.d)
        arr.setflags(write=False)
        object.__setattr__(self, "_array", arr)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        return iter(self.indices)

    def __contains__(self, p) -> bool:
        return tuple(p) in set(self.indices)

    @property
    def array(self) -> np.ndarray:
        """Read-only ``(len, d)`` integer array of exponents."""
        return self._array

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "d": self.d, "w": self.w, "indices": [list(p) for p in self.indices]}
        )

    @classmethod
    def from_json(cls, text: str) -> "MultiIndexSet":
        obj = json.loads(text)
        return cls(obj["kind"], int(obj["d"]), int(obj["w"]), tuple(tuple(p) for p in obj["indices"]))


def _enumerate(kind: str, d: int, w: int, cap: int) -> list[tuple[int, ...]]:
    # state is the running sum / product / max; every predicate is monotone
    # in each coordinate, so a coordinate loop can stop at the first failure
    if kind in ("TD", "TP"):
        cost = lambda v: v  # noqa: E731
    elif kind == "SM":
        cost = smolyak_level
    elif kind == "HC":
        cost = lambda v: v + 1  # noqa: E731
    else:
        raise ValueError(f"unknown index set kind {kind!r}")

    if kind == "HC":
        combine, start = (lambda s, c: s * c), 1
    elif kind == "TP":
        combine, start = max, 0
    else:
        combine, start = (lambda s, c: s + c), 0

    if kind == "HC":
        # the product predicate is empty at w = 0; keep the constant so that
        # level 0 means "constant trend" for every family
        w = max(w, 1)

    out: list[tuple[int, ...]] = []
    prefix = [0] * d

    def rec(n: int, state: int) -> None:
        if n == d:
            if len(out) >= cap:
                raise CardinalityError(f"{kind}(d={d}, w={w}) exceeds the cardinality cap {cap}")
            out.append(tuple(prefix))
            return
        v = 0
        while True:
            s = combine(state, cost(v))
            if s > w:
                break
            prefix[n] = v
            rec(n + 1, s)
            v += 1
        prefix[n] = 0

    rec(0, start)
    return out


def build_index_set(kind: str, d: int, w: int, cap: int = DEFAULT_CAP) -> MultiIndexSet:
    """All multi-indices of the given family, dimension and level."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if w < 0:
        raise ValueError("w must be >= 0")
    if kind in EXTENDED_KINDS:
        return extend_index_set(build_index_set(kind[len("Extended"):], d, w, cap), cap)
    idx = _enumerate(kind, d, w, cap)
    idx.sort(key=_grlex_key)
    return MultiIndexSet(kind, d, w, tuple(idx))


def extend_index_set(base: MultiIndexSet, cap: int = DEFAULT_CAP) -> MultiIndexSet:
    """Union of ``p`` and ``2p`` over the base set, without repeats."""
    if base.kind not in ("SM", "HC", "TD"):
        raise ValueError(f"extension is defined for SM, HC and TD sets, not {base.kind}")
    seen = set(base.indices)
    seen.update(tuple(2 * v for v in p) for p in base.indices)
    if len(seen) > cap:
        raise CardinalityError(f"extended set exceeds the cardinality cap {cap}")
    idx = sorted(seen, key=_grlex_key)
    return MultiIndexSet("Extended" + base.kind, base.d, base.w, tuple(idx))


def eval_monomial(p: Sequence[int], x: Sequence[float]) -> float:
    """Product of ``x_n ** p_n`` with ``0 ** 0 == 1``."""
    if len(p) != len(x):
        raise ValueError("exponent and point dimensions differ")
    out = 1.0
    for e, v in zip(p, x):
        if e:
            out *= float(v) ** int(e)
    return out


def smolyak_abscissas(i: int) -> np.ndarray:
    """Nested Clenshaw-Curtis nodes of level ``i`` on [-1, 1]."""
    if i < 1:
        raise ValueError("level must be >= 1")
    if i == 1:
        return np.zeros(1)
    m = 2 ** (i - 1) + 1
    j = np.arange(m)
    y = -np.cos(np.pi * j / (m - 1))
    # symmetric snapping: cos(pi/2) is 6e-17, not 0, and nesting checks use
    # exact membership
    y[np.abs(y) < 1e-15] = 0.0
    half = m // 2
    y[m - half:] = -y[:half][::-1]
    return y


def collocation_count_bounds(d: int, w: int) -> tuple[float, float]:
    """Lower and upper estimates of the number of sparse-grid knots."""
    if d < 1 or w < 0:
        raise ValueError("need d >= 1 and w >= 0")
    lower = d * (2**w - 1)
    two_ed = 2.0 * math.e * d
    upper = two_ed**w * min(w + 1, two_ed)
    return float(lower), float(upper)
