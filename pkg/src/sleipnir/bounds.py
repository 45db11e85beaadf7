"""Closed-form error budgets for quadrature Fourier features.

``e_m`` is the master term sqrt(pi) * (e / (4 l^2 m))^m for the kernel with
rho = sqrt(pi).  Everything is evaluated in log-space; results saturate to 0
or +inf instead of raising on under/overflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

SQRT_PI = math.sqrt(math.pi)


class BoundDomainError(ValueError):
    pass


def _exp_sat(x):
    if x > 709.0:
        return math.inf
    if x < -745.0:
        return 0.0
    return math.exp(x)


def log_e_m(m: int, l: float) -> float:
    if m < 1:
        raise BoundDomainError(f"E_m needs m >= 1, got {m}")
    if not l > 0:
        raise BoundDomainError(f"lengthscale must be positive, got {l}")
    return 0.5 * math.log(math.pi) + m * (1.0 - math.log(4.0 * l * l) - math.log(m))


def e_m(m: int, l: float) -> float:
    return _exp_sat(log_e_m(m, l))


@dataclass(frozen=True)
class ErrorBudget:
    m: int
    lengthscale: float
    rho: float
    k_bound: float
    d1_bound: float
    d2_bound: float
    d1_bound_tight: float


def theorem2_budget(m: int, l: float, rho: float = SQRT_PI) -> ErrorBudget:
    """Uniform bounds on |r| <= 1 for the QFF errors of k, d/dt_i k and d2/dt_i dt_j k.

    ``rho`` rescales every bound by rho/sqrt(pi); the bare formulas assume
    rho = sqrt(pi).  ``d1_bound_tight`` is the intermediate 8(m-1)E_{m-1}
    form, exposed for reference only.
    """
    if m < 4:
        raise BoundDomainError(f"derivative budgets need m >= 4 (E_(m-3) defined), got {m}")
    log_scale = math.log(rho) - math.log(SQRT_PI)
    k = _exp_sat(log_scale + log_e_m(m, l))
    d1 = _exp_sat(log_scale + math.log(2.0 * math.e) - 2.0 * math.log(l) + log_e_m(m - 2, l))
    d2 = _exp_sat(log_scale + math.log(2.0 * math.e) - 4.0 * math.log(l) + log_e_m(m - 3, l))
    d1t = _exp_sat(log_scale + math.log(8.0 * (m - 1)) + log_e_m(m - 1, l))
    return ErrorBudget(m, l, rho, k, d1, d2, d1t)


def min_order_gprd(l: float, rho: float, n: int, c: float, R: float, C: float) -> int:
    """Smallest QFF order guaranteeing posterior errors <= C on [0, 1].

    Out-of-range constants are replaced by 1 first (R < 1, c > 1, rho < 1,
    l > 1); the logarithm is taken base 2.
    """
    for name, v in (("l", l), ("rho", rho), ("n", n), ("c", c), ("R", R), ("C", C)):
        if not v > 0:
            raise BoundDomainError(f"{name} must be positive, got {v}")
    if not C < 1:
        raise BoundDomainError(f"tolerance C must be < 1, got {C}")
    R, c, rho, l = max(R, 1.0), min(c, 1.0), max(rho, 1.0), min(l, 1.0)
    log_arg = (math.log2(270.0) + 2 * math.log2(n) + 3 * math.log2(rho) + math.log2(R)
               - 8 * math.log2(l) - 2 * math.log2(c) - math.log2(C))
    return math.ceil(3.0 + max(math.e / (2.0 * l * l), log_arg))


def min_order_risk(l: float, rho: float, lam: float, gamma: float, n: int, eps: float) -> int:
    """Smallest QFF order guaranteeing relative risk error <= eps.

    Requires n >= 60 and 0 < eps < 1.  Out-of-range constants are replaced
    by 1 first (gamma > 1, lam > 1, rho < 1, l > 1).
    """
    if n < 60:
        raise BoundDomainError(f"the relative risk bound assumes n >= 60, got n={n}")
    if not 0 < eps < 1:
        raise BoundDomainError(f"the relative risk bound assumes 0 < eps < 1, got {eps}")
    for name, v in (("l", l), ("rho", rho), ("lam", lam), ("gamma", gamma)):
        if not v > 0:
            raise BoundDomainError(f"{name} must be positive, got {v}")
    gamma, lam, rho, l = min(gamma, 1.0), min(lam, 1.0), max(rho, 1.0), min(l, 1.0)
    log_arg = (2 * math.log2(rho) + 3 * math.log2(n) - 2 * math.log2(lam) - math.log2(gamma)
               - 4 * math.log2(l) - math.log2(eps))
    return math.ceil(10.0 + max(math.e / (2.0 * l * l), log_arg))
