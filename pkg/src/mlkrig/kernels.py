"""Covariance functions and dense / matrix-free covariance products.

The Matérn function is

    phi(r) = z**nu * K_nu(z) / (Gamma(nu) * 2**(nu - 1)),   z = sqrt(2 nu) r / rho,

normalised so that ``phi(0) = 1``.  When ``nu - 1/2`` is a non-negative
integer ``n`` the exponential-polynomial closed form is used instead of the
Bessel function.  The Gaussian family is ``exp(-r**2 / (2 rho**2))``.

With an anisotropic weight vector ``theta`` the distance becomes
``sqrt((x - y)^T diag(theta) (x - y))`` and ``rho`` is not used; the two
parameterisations are mutually exclusive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._backend import core
from ._fallback import GAUSSIAN, MATERN, MATERN_HALF

DENSE_CAP = 10**8
_HALF_INT_MAX = 30


@dataclass(frozen=True)
class KernelSpec:
    family: str = "matern"
    nu: float = 0.5
    rho: float = 1.0
    theta: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in ("matern", "gaussian", "identity"):
            raise ValueError(f"unknown covariance family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if fam == "matern" and not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.theta is not None:
            th = tuple(float(v) for v in self.theta)
            if any(not v > 0 for v in th):
                raise ValueError("all anisotropic weights must be positive")
            object.__setattr__(self, "theta", th)

    def with_params(self, nu: float, rho: float) -> "KernelSpec":
        return KernelSpec(self.family, float(nu), float(rho), self.theta)

    def to_dict(self) -> dict:
        out = {"family": self.family, "nu": self.nu, "rho": self.rho}
        if self.theta is not None:
            out["theta"] = list(self.theta)
        return out


def _half_integer_coefficients(n: int) -> np.ndarray:
    # Horner coefficients, highest power first, of
    #   n!/(2n)! * sum_k (n+k)!/(k!(n-k)!) (2z)^(n-k)
    pref = math.factorial(n) / math.factorial(2 * n)
    return np.array(
        [
            pref * math.factorial(n + k) / (math.factorial(k) * math.factorial(n - k)) * 2.0 ** (n - k)
            for k in range(n + 1)
        ]
    )


def _half_integer_order(nu: float) -> Optional[int]:
    n = nu - 0.5
    r = round(n)
    if abs(n - r) < 1e-12 and 0 <= r <= _HALF_INT_MAX:
        return int(r)
    return None


def family_params(spec: KernelSpec, d: int, force_general: bool = False):
    """Arguments shared by all core kernel routines.

    Returns ``(family_code, nu, lognorm, coef, weights, scale)``.
    """
    if spec.family == "identity":
        raise ValueError("the identity stub has no core representation")
    if spec.theta is not None:
        if len(spec.theta) != d:
            raise ValueError(f"theta has length {len(spec.theta)}, points have dimension {d}")
        weights = np.asarray(spec.theta, dtype=float)
        rho = 1.0
    else:
        weights = np.ones(d)
        rho = spec.rho
    if spec.family == "gaussian":
        return GAUSSIAN, 0.0, 0.0, np.zeros(1), weights, 1.0 / rho
    nu = float(spec.nu)
    scale = math.sqrt(2.0 * nu) / rho
    n = None if force_general else _half_integer_order(nu)
    if n is not None:
        return MATERN_HALF, nu, 0.0, _half_integer_coefficients(n), weights, scale
    lognorm = -(math.lgamma(nu) + (nu - 1.0) * math.log(2.0))
    return MATERN, nu, lognorm, np.zeros(1), weights, scale


def _check_r(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("distances must be finite")
    if np.any(r < 0):
        raise ValueError("distances must be non-negative")
    return r


def matern(r, nu: float, rho: float, *, force_general: bool = False):
    """Matérn covariance at distance(s) ``r``; scalar in, scalar out."""
    r = _check_r(r)
    fam, nu, lognorm, coef, _, scale = family_params(KernelSpec("matern", nu, rho), 1, force_general)
    z = np.ascontiguousarray((scale * r).ravel())
    out = core.phi_of_scaled(z, fam, nu, lognorm, coef).reshape(r.shape)
    return float(out) if out.ndim == 0 else out


def gaussian(r, rho: float):
    r = _check_r(r)
    out = np.exp(-(r * r) / (2.0 * rho * rho))
    return float(out) if out.ndim == 0 else out


def evaluate(r, spec: KernelSpec):
    """Covariance at distance(s) ``r`` for any family.

    With anisotropic weights ``r`` must already be the weighted distance.
    """
    r = _check_r(r)
    if spec.family == "identity":
        out = (r == 0).astype(float)
        return float(out) if out.ndim == 0 else out
    fam, nu, lognorm, coef, _, scale = family_params(spec, len(spec.theta) if spec.theta else 1)
    z = np.ascontiguousarray((scale * r).ravel())
    out = core.phi_of_scaled(z, fam, nu, lognorm, coef).reshape(r.shape)
    return float(out) if out.ndim == 0 else out


def aniso_distance(x, y, theta) -> float:
    """Weighted Euclidean distance ``sqrt((x-y)^T diag(theta) (x-y))``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    th = np.asarray(theta, dtype=float)
    if x.shape != y.shape or th.shape != x.shape:
        raise ValueError("dimension mismatch")
    if np.any(th <= 0):
        raise ValueError("all weights must be positive")
    diff = x - y
    return float(np.sqrt(np.sum(th * diff * diff)))


def _as_points(pts) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(pts, dtype=float))
    if a.ndim == 1:
        a = a[:, None]
    return a


def cov_matrix(pts_a, pts_b, spec: KernelSpec, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense covariance block between two point sets."""
    a = _as_points(pts_a)
    b = _as_points(pts_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("point sets have different dimensions")
    if a.shape[0] * b.shape[0] > cap:
        raise MemoryError(f"dense covariance of {a.shape[0]}x{b.shape[0]} exceeds cap {cap}")
    if spec.family == "identity":
        diff = a[:, None, :] - b[None, :, :]
        return np.all(diff == 0, axis=2).astype(float)
    fam, nu, lognorm, coef, weights, scale = family_params(spec, a.shape[1])
    if a is b or (a.shape == b.shape and np.array_equal(a, b)):
        return core.kernel_block_sym(a, weights, scale, fam, nu, lognorm, coef)
    return core.kernel_block(a, b, weights, scale, fam, nu, lognorm, coef)


def cov_matvec(pts, spec: KernelSpec, v) -> np.ndarray:
    """``C v`` by direct summation, without forming ``C``."""
    x = _as_points(pts)
    v = np.ascontiguousarray(np.asarray(v, dtype=float))
    if v.shape != (x.shape[0],):
        raise ValueError("vector length must equal the number of points")
    if spec.family == "identity":
        return cov_matrix(x, x, spec) @ v
    fam, nu, lognorm, coef, weights, scale = family_params(spec, x.shape[1])
    return core.kernel_matvec(x, v, weights, scale, fam, nu, lognorm, coef)
