"""A-posteriori bounds for the truncation of the multi-level covariance.

Chain of estimates:

* a radius ``sigma_hat`` of analyticity of the kernel on well separated
  cells (depends on ``tau_ij`` and ``d``) and a bound ``M~`` of the
  extension on the corresponding polyellipse;
* sparse-grid decay constants turning ``(sigma, d, w + a, M~)`` into a
  bound on every dropped entry, with ``eta`` the number of collocation
  nodes of the index set (known only up to an interval);
* aggregation over the retained level pairs into a bound on ``||E||_2``;
* a perturbation bound on ``||C_W^{-1} - C~_W^{-1}||_2``.

Every constant is logged so the numbers can be recomputed by hand.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .covariance_assembly import tau_schedule
from .index_sets import collocation_count_bounds

log = logging.getLogger(__name__)

LOG2 = math.log(2.0)


# ---------------------------------------------------------------- analyticity


def analyticity_radius(tau_ij: float, d: int) -> tuple[float, float]:
    """``(literal, magnitude)`` of ``log(u + 1 - sqrt(u (u + 2)))``, ``u = tau/(2d)``.

    The argument lies in (0, 1) for ``tau > 0``, so the literal value is
    negative; the magnitude ``log(u + 1 + sqrt(u (u + 2))) = arccosh(u + 1)``
    is the positive radius used downstream.
    """
    if not tau_ij > 0:
        raise ValueError("tau_ij must be positive")
    if d < 1:
        raise ValueError("d must be >= 1")
    u = tau_ij / (2.0 * d)
    root = math.sqrt(u * (u + 2.0))
    # u + 1 - root = 1 / (u + 1 + root); the reciprocal form avoids cancellation
    literal = -math.log(u + 1.0 + root)
    return literal, -literal


def gaussian_extension_bound(theta: Sequence[float], sigma_hat: float, d: Optional[int] = None) -> float:
    """``exp(2d (e^{2s} + e^{-2s})) * prod exp(theta_n)``."""
    th = [float(v) for v in theta]
    d = len(th) if d is None else d
    if not sigma_hat >= 0:
        raise ValueError("sigma_hat must be non-negative")
    return math.exp(2.0 * d * (math.exp(2 * sigma_hat) + math.exp(-2 * sigma_hat)) + sum(th))


def matern_extension_bound(nu: float, theta: Sequence[float], sigma_hat: float) -> float:
    """Bound of the Matérn extension for half-integer ``nu = n + 1/2``.

    ``exp(-sqrt(4(3+sqrt 2)) nu |theta|) * n!/(2n)! * sum_k c_k (sqrt(8 nu) alpha)^(n-k)``
    with ``alpha = |theta| sqrt(2(3 + sqrt(2) e^sigma_hat))`` and the
    closed-form coefficients ``c_k = (n+k)!/(k!(n-k)!)``, ``k = 0..n``.
    """
    n = nu - 0.5
    if abs(n - round(n)) > 1e-12 or n < 0:
        raise ValueError("the Matérn extension bound needs nu = n + 1/2")
    n = int(round(n))
    tn = math.sqrt(sum(float(v) ** 2 for v in theta))
    alpha = tn * math.sqrt(2.0 * (3.0 + math.sqrt(2.0) * math.exp(sigma_hat)))
    s = sum(math.factorial(n + k) / (math.factorial(k) * math.factorial(n - k))
            * (math.sqrt(8.0 * nu) * alpha) ** (n - k) for k in range(n + 1))
    pref = math.factorial(n) / math.factorial(2 * n)
    return math.exp(-math.sqrt(4.0 * (3.0 + math.sqrt(2.0))) * nu * tn) * pref * s


# ---------------------------------------------------------------- constants


def C_sigma(sigma: float) -> float:
    return 4.0 / math.expm1(2.0 * sigma)


def C2_tilde(sigma: float) -> float:
    return 1.0 + math.sqrt(math.pi / (2.0 * sigma)) / LOG2


def delta_star(sigma: float) -> float:
    return (math.e * LOG2 - 1.0) / C2_tilde(sigma)


def a_const(delta: float, sigma: float) -> float:
    brace = (1.0 / (sigma * LOG2 ** 2) + 1.0 / (LOG2 * math.sqrt(2.0 * sigma))
             + 2.0 * (1.0 + math.sqrt(math.pi / (2.0 * sigma)) / LOG2))
    return math.exp(delta * sigma * brace)


def C1_const(sigma: float, M_tilde: float, delta: Optional[float] = None) -> float:
    delta = delta_star(sigma) if delta is None else delta
    return 4.0 * M_tilde * C_sigma(sigma) * a_const(delta, sigma) / (math.e * delta * sigma)


def mu1(sigma: float, d: int) -> float:
    return sigma / (1.0 + math.log(2.0 * d))


def mu2(d: int) -> float:
    return LOG2 / (d * (1.0 + math.log(2.0 * d)))


def mu3(sigma: float, d: int) -> float:
    return sigma * delta_star(sigma) * C2_tilde(sigma) / (1.0 + math.log(2.0 * d))


def _pow(x: float, e: float) -> float:
    """``x ** e`` that saturates to ``inf`` instead of raising."""
    try:
        return x ** e
    except OverflowError:
        return math.inf


def _ratio(C1: float) -> float:
    return math.inf if C1 == 1.0 else 1.0 / abs(1.0 - C1)


def Q_const(sigma: float, d: int, M_tilde: float) -> float:
    C1 = C1_const(sigma, M_tilde)
    return (C1 / math.exp(sigma * delta_star(sigma) * C2_tilde(sigma))
            * _pow(max(1.0, C1), d) * _ratio(C1))


def regime(d: int, w_plus_a: int) -> str:
    return "sub_exponential" if w_plus_a > d / LOG2 else "algebraic"


def constants(sigma: float, d: int, M_tilde: float) -> dict:
    ds = delta_star(sigma)
    C1 = C1_const(sigma, M_tilde)
    return {"sigma": sigma, "delta_star": ds, "C_sigma": C_sigma(sigma), "C2_tilde": C2_tilde(sigma),
            "a": a_const(ds, sigma), "C1": C1, "Q": Q_const(sigma, d, M_tilde), "mu1": mu1(sigma, d),
            "mu2": mu2(d), "mu3": mu3(sigma, d), "M_tilde": M_tilde}


# ---------------------------------------------------------------- decay


def _decay_at(sigma: float, d: int, w_plus_a: int, M_tilde: float, eta: float) -> float:
    if regime(d, w_plus_a) == "sub_exponential":
        return (Q_const(sigma, d, M_tilde) * eta ** mu3(sigma, d)
                * math.exp(-d * sigma / 2.0 ** (1.0 / d) * eta ** mu2(d)))
    C1 = C1_const(sigma, M_tilde)
    return C1 * _ratio(C1) * _pow(max(1.0, C1), d) * eta ** (-mu1(sigma, d))


@dataclass
class DecayBound:
    regime: str
    eta: tuple[float, float]
    value: tuple[float, float]       # bound at (lower eta, upper eta)
    singular: bool
    constants: dict

    @property
    def upper(self) -> float:
        return max(self.value)


def decay_bound(sigma: float, d: int, w: int, a: int, M_tilde: float) -> DecayBound:
    """Sparse-grid interpolation error bound at both ends of the ``eta`` interval."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    wa = int(w) + int(a)
    lo, hi = collocation_count_bounds(d, wa)
    eta = (float(max(lo, 1)), float(max(hi, 1)))
    C = constants(sigma, d, M_tilde)
    singular = C["C1"] == 1.0
    vals = tuple(_decay_at(sigma, d, wa, M_tilde, e) for e in eta)
    log.debug("decay bound constants %s eta=%s value=%s", C, eta, vals)
    return DecayBound(regime(d, wa), eta, vals, singular, C)


def entry_bound_analytic(sigma: float, d: int, w: int, a: int, M_tilde: float,
                         n_m: int = 1, n_q: int = 1) -> tuple[float, float]:
    """Bound on ``|psi_m^T C psi_q|`` for a kernel analytic on the product polyellipse.

    Sub-exponential branch: ``sqrt(n_m n_q) * M * eta^{2 mu3} exp(-2 d sigma / 2^{1/d} eta^{mu2})``
    with the nested constant ``M`` (built from ``M~_eps1``); algebraic
    branch with the ``P~_eps1`` construction.  Returned at both ends of eta.
    """
    wa = int(w) + int(a)
    lo, hi = collocation_count_bounds(d, wa)
    ds = delta_star(sigma)
    out = []
    for eta in (float(max(lo, 1)), float(max(hi, 1))):
        if regime(d, wa) == "sub_exponential":
            Q = Q_const(sigma, d, M_tilde)
            M_eps1 = Q * eta ** mu3(sigma, d) * math.exp(-d * sigma / 2.0 ** (1.0 / d) * eta ** mu2(d))
            C1e = C1_const(sigma, M_eps1)
            Mcal = (8.0 * Q * C_sigma(sigma) * a_const(ds, sigma)
                    / (math.exp(sigma * ds * C2_tilde(sigma)) * math.e * ds * sigma)
                    * max(1.0, C1e) * _ratio(C1e))
            val = Mcal * eta ** (2 * mu3(sigma, d)) * math.exp(-2 * d * sigma / 2.0 ** (1.0 / d) * eta ** mu2(d))
        else:
            C1 = C1_const(sigma, M_tilde)
            P_eps1 = C1 * _ratio(C1) * _pow(max(1.0, C1), d) * eta ** (-mu1(sigma, d))
            C1p = C1_const(sigma, P_eps1)
            val = (8.0 * C_sigma(sigma) * a_const(ds, sigma) * C1 / (math.e * ds * sigma)
                   * eta ** (-2 * mu1(sigma, d))
                   * _pow(max(1.0, C1p), d) * _ratio(C1p) * _pow(max(1.0, C1), d) * _ratio(C1))
        out.append(math.sqrt(n_m * n_q) * val)
    return out[0], out[1]


# ---------------------------------------------------------------- matrices


def matrix_error_bound(n: int, t: int, p_tilde: int, per_pair: dict) -> float:
    """``2^{t+1} p~^2 sum_{i,j = max(n,1)..t} bound_ij``."""
    lo = max(n, 1)
    if t < lo:
        return 0.0
    total = 0.0
    for i in range(lo, t + 1):
        for j in range(lo, t + 1):
            total += per_pair[(i, j)]
    return 2.0 ** (t + 1) * p_tilde ** 2 * total


@dataclass
class InverseBound:
    value: float
    in_regime: bool
    reason: str = ""
    neumann: float = math.inf


def inverse_perturbation_bound(sigma_min: float, sigma_max: float, E_norm: float) -> InverseBound:
    """``sigma_min^{-2} (1 + sigma_max^{-1} ||E||) ||E||`` with its validity flag.

    ``neumann`` carries the standard bound ``||E|| / (s (s - ||E||))`` valid
    when ``||E|| < s = sigma_min``.
    """
    if not sigma_min > 0 or not sigma_max > 0:
        raise ValueError("singular values must be positive")
    if E_norm < 0:
        raise ValueError("||E|| must be non-negative")
    val = (1.0 + E_norm / sigma_max) * E_norm / sigma_min ** 2
    ok = sigma_min * E_norm < 1.0
    reason = "" if ok else f"sigma_min*||E|| = {sigma_min * E_norm:.3e} >= 1"
    neu = E_norm / (sigma_min * (sigma_min - E_norm)) if E_norm < sigma_min else math.inf
    return InverseBound(val, ok, reason, neu)


# ---------------------------------------------------------------- report


@dataclass
class BoundReport:
    regime: str
    d: int
    w: int
    a: int
    t: int
    n: int
    tau: float
    p_tilde: int
    eta: tuple[float, float]
    pairs: dict = field(default_factory=dict)          # "(i,j)" -> constants and bounds
    E_bound: tuple[float, float] = (math.inf, math.inf)
    C1_max: float = math.inf
    measured: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def fix(x):
            if isinstance(x, float) and not math.isfinite(x):
                return str(x)
            if isinstance(x, dict):
                return {str(k): fix(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [fix(v) for v in x]
            return x
        return json.dumps(fix(asdict(self)), indent=2, sort_keys=True)


def bound_report(kernel, d: int, w: int, a: int, t: int, n: int, tau: float, p_tilde: int) -> BoundReport:
    """Per-pair decay bounds on the ``tau_ij`` schedule and the ``||E||_2`` bound.

    Matérn kernels need ``nu = n + 1/2``; the isotropic length scale maps to
    weights ``theta_n = 1 / rho^2``.
    """
    theta = kernel.theta if kernel.theta is not None else (1.0 / kernel.rho ** 2,) * d
    wa = w + a
    lo, hi = collocation_count_bounds(d, wa)
    rep = BoundReport(regime(d, wa), d, w, a, t, n, tau, p_tilde, (float(lo), float(hi)))
    per_lo, per_hi = {}, {}
    c1max = 0.0
    start = max(n, 1)
    for i in range(start, t + 1):
        for j in range(start, t + 1):
            tij = tau_schedule(tau, t, i, j)
            literal, s_hat = analyticity_radius(tij, d)
            sigma = s_hat / 2.0
            if kernel.family == "gaussian":
                Mt = gaussian_extension_bound(theta, s_hat, d)
            else:
                Mt = matern_extension_bound(kernel.nu, theta, s_hat)
            db = decay_bound(sigma, d, w, a, Mt)
            per_lo[(i, j)], per_hi[(i, j)] = db.value
            c1max = max(c1max, db.constants["C1"])
            rep.pairs[f"({i},{j})"] = {"tau_ij": tij, "radius_literal": literal, "sigma_hat": s_hat,
                                        "bound": list(db.value), "singular": db.singular, **db.constants}
    rep.E_bound = (matrix_error_bound(n, t, p_tilde, per_lo), matrix_error_bound(n, t, p_tilde, per_hi))
    rep.C1_max = c1max if rep.pairs else 0.0
    return rep
