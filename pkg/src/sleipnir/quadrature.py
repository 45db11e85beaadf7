"""Gauss-Hermite quadrature rules for the weight exp(-w^2).

Nodes are found by Newton iteration on the orthonormal Hermite recurrence,
started from WKB phase-condition guesses (within ~1% of the node spacing). Weights are carried in log-space so
that orders up to ``MAX_ORDER`` do not overflow.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

MAX_ORDER = 512
_NEWTON_TOL = 1e-14
_NEWTON_MAXITER = 100
_RESCALE = 1e150
_LOG_RESCALE = np.log(_RESCALE)


class QuadratureError(ValueError):
    """Raised when a rule cannot be constructed or applied."""


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        for arr in (self.nodes, self.weights, self.log_weights):
            arr.setflags(write=False)

    def __len__(self):
        return self.order


def _hermite_recurrence(x, m):
    """Orthonormal Hermite values p_m(x), p_{m-1}(x) and a common log-scale.

    Returns ``(p_m, p_{m-1}, log_scale)`` with the true values being
    ``p * exp(log_scale)``. The polynomials are orthonormal w.r.t. exp(-x^2).
    """
    p1 = np.full_like(x, np.pi ** -0.25)
    p2 = np.zeros_like(x)
    log_scale = np.zeros_like(x)
    for j in range(1, m + 1):
        p3 = p2
        p2 = p1
        p1 = x * np.sqrt(2.0 / j) * p2 - np.sqrt((j - 1.0) / j) * p3
        big = np.abs(p1) > _RESCALE
        if big.any():
            p1 = np.where(big, p1 / _RESCALE, p1)
            p2 = np.where(big, p2 / _RESCALE, p2)
            log_scale = log_scale + big * _LOG_RESCALE
    return p1, p2, log_scale


def _initial_guesses(m):
    # WKB phase condition for the k-th root counted from the largest:
    # theta - sin(theta)cos(theta) = pi(4k - 1)/(2 nu), x = sqrt(nu) cos(theta)
    nu = 2.0 * m + 1.0
    k = np.arange(1, m + 1)
    target = np.pi * (4.0 * k - 1.0) / (2.0 * nu)
    lo = np.zeros(m)
    hi = np.full(m, np.pi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = mid - 0.5 * np.sin(2.0 * mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.sqrt(nu) * np.cos(0.5 * (lo + hi))


def _compute_rule(m):
    x = _initial_guesses(m)
    dp = None
    for _ in range(_NEWTON_MAXITER):
        p, pm1, _ = _hermite_recurrence(x, m)
        dp = np.sqrt(2.0 * m) * pm1
        step = p / dp
        x = x - step
        if np.max(np.abs(step)) <= _NEWTON_TOL * max(1.0, np.max(np.abs(x))):
            break
    else:
        raise QuadratureError(f"Newton iteration for Gauss-Hermite order {m} did not converge")
    x = np.sort(x)
    # enforce exact symmetry; the recurrence is symmetric so this only removes round-off
    x = 0.5 * (x - x[::-1])
    if m % 2 == 1:
        x[m // 2] = 0.0
    if np.any(np.diff(x) <= 0):
        raise QuadratureError(f"Gauss-Hermite order {m}: Newton iteration produced repeated nodes")
    _, pm1, log_scale = _hermite_recurrence(x, m)
    # w_i = 2 / (2m p_{m-1}(x_i)^2) in the orthonormal normalisation
    log_w = np.log(2.0) - np.log(2.0 * m) - 2.0 * (np.log(np.abs(pm1)) + log_scale)
    log_w = 0.5 * (log_w + log_w[::-1])
    return x, log_w


_cache: dict[int, QuadratureRule] = {}
_cache_lock = threading.Lock()


def gauss_hermite_rule(m: int) -> QuadratureRule:
    """Order-``m`` Gauss-Hermite rule, exact for polynomials of degree <= 2m-1.

    Rules are cached by order; the returned arrays are read-only.
    """
    if isinstance(m, bool) or int(m) != m:
        raise QuadratureError(f"quadrature order must be an integer, got {m!r}")
    m = int(m)
    if m < 1 or m > MAX_ORDER:
        raise QuadratureError(f"quadrature order must be in [1, {MAX_ORDER}], got {m}")
    with _cache_lock:
        rule = _cache.get(m)
    if rule is not None:
        return rule
    nodes, log_w = _compute_rule(m)
    rule = QuadratureRule(order=m, nodes=nodes, weights=np.exp(log_w), log_weights=log_w)
    with _cache_lock:
        return _cache.setdefault(m, rule)


def quadrature_apply(rule: QuadratureRule, f: Callable) -> float:
    """Evaluate sum_i W_i f(w_i).

    ``f`` is called once with the node array and must broadcast over it.
    """
    vals = np.asarray(f(rule.nodes), dtype=float)
    vals = np.broadcast_to(vals, rule.nodes.shape)
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.argmax(bad))
        raise QuadratureError(f"integrand is not finite at node {i} (w = {rule.nodes[i]!r})")
    return float(np.dot(rule.weights, vals))
