"""Experiment drivers shared by the CLI, the scripts and the acceptance suite.

Every driver returns plain row dicts so the caller decides how to print or
store them.  Nothing in here touches the filesystem.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .bounds import theorem2_budget
from .features import QffFeatureMap, make_feature_map, qff_map
from .gp_deriv import DerivObservationSet, ExactPosterior, FeaturePosterior
from .kernels import RbfHyperparams, kernel_d1, kernel_d2, kernel_eval
from .odin import (
    DimHyperparams,
    OdinProblem,
    OptimizeOptions,
    OptimizerError,
    fit_hyperparams,
    optimize,
    qff_maps_for,
    time_risk_iteration,
)
from .systems import Dataset, MetricError, OdeSystem, trajectory_rmse

EPS = np.finfo(float).eps
SQRT_PI = math.sqrt(math.pi)


# ---------------------------------------------------------------------------
# kernel approximation errors
# ---------------------------------------------------------------------------


def _feature_products(fmap, r):
    """phi(0)^T phi(r), phi'(0)^T phi(r), phi'(0)^T phi'(r) on the grid r."""
    f0 = fmap.matrices([0.0])
    fr = fmap.matrices(r)
    k = f0.Phi[:, 0] @ fr.Phi
    k1 = f0.PhiPrime[:, 0] @ fr.Phi
    k2 = f0.PhiPrime[:, 0] @ fr.PhiPrime
    return k, k1, k2


def _kernel_targets(h, r):
    # the pairing phi'(a)^T phi(b) approximates d/da k(a - b) at a = 0, b = r
    return kernel_eval(h, r), kernel_d1(h, -r), kernel_d2(h, -r)


def qff_roundoff_allowance(fmap: QffFeatureMap, r):
    """Forward error bound for evaluating the three QFF sums in float64.

    Each term a_i^2 f_i^p cos(f_i r) carries O(u) relative error from the
    weights, O(m u) from summation and |f_i r| u from argument reduction.
    Returns arrays of per-point allowances for k, k', k''.
    """
    a2 = fmap.amplitudes ** 2
    f = np.abs(fmap.frequencies)
    m = fmap.order
    per_term = (2 * m + 4) + 2.0 * np.outer(np.abs(r), f)
    out = []
    for p in range(3):
        out.append(EPS * (per_term * (a2 * f ** p)[None, :]).sum(axis=1))
    return out


def kernel_errors(kind, h: RbfHyperparams, count, grid=1001, seed=0):
    """Max grid errors (k, k', k'') of one feature map on r in [0, 1]."""
    r = np.linspace(0.0, 1.0, grid)
    fmap = make_feature_map(kind, h, count, seed)
    approx = _feature_products(fmap, r)
    target = _kernel_targets(h, r)
    return tuple(float(np.max(np.abs(a - t))) for a, t in zip(approx, target))


def kernel_error_sweep(lengthscales, orders, kinds=("qff",), grid=1001, samples=100, rho=SQRT_PI,
                       seed=0):
    """Rows of the kernel approximation-error sweep.

    ``orders`` are QFF orders m; random maps get the same feature dimension 2m.
    QFF rows carry the budget, a float64 round-off allowance and a violation
    flag; random rows carry the median and 12.5/87.5 % quantiles over
    ``samples`` seeds.
    """
    if grid < 2:
        raise ValueError("grid needs at least 2 points")
    r = np.linspace(0.0, 1.0, grid)
    rows = []
    for l in lengthscales:
        h = RbfHyperparams(rho, l)
        target = _kernel_targets(h, r)
        for m in orders:
            budget = theorem2_budget(m, l, rho) if m >= 4 else None
            bounds = (budget.k_bound, budget.d1_bound, budget.d2_bound) if budget else (np.nan,) * 3
            for kind in kinds:
                row = {"kind": kind, "l": l, "m": m}
                if kind == "qff":
                    fmap = qff_map(h, m)
                    approx = _feature_products(fmap, r)
                    allow = qff_roundoff_allowance(fmap, r)
                    errs, strict, sound = [], True, True
                    for a, t, al, b in zip(approx, target, allow, bounds):
                        e = np.abs(a - t)
                        errs.append(float(e.max()))
                        strict &= bool(np.all(e <= b))
                        sound &= bool(np.all(e <= b + al))
                    row.update(err_k=errs[0], err_k1=errs[1], err_k2=errs[2],
                               q_lo_k=errs[0], q_lo_k1=errs[1], q_lo_k2=errs[2],
                               q_hi_k=errs[0], q_hi_k1=errs[1], q_hi_k2=errs[2],
                               roundoff_k=float(allow[0].max()), roundoff_k1=float(allow[1].max()),
                               roundoff_k2=float(allow[2].max()), strict_ok=strict, bound_ok=sound)
                else:
                    per = np.array([kernel_errors(kind, h, 2 * m, grid, seed + s) for s in range(samples)])
                    med = np.median(per, axis=0)
                    lo, hi = np.percentile(per, [12.5, 87.5], axis=0)
                    row.update(err_k=med[0], err_k1=med[1], err_k2=med[2],
                               q_lo_k=lo[0], q_lo_k1=lo[1], q_lo_k2=lo[2],
                               q_hi_k=hi[0], q_hi_k1=hi[1], q_hi_k2=hi[2],
                               roundoff_k=np.nan, roundoff_k1=np.nan, roundoff_k2=np.nan,
                               strict_ok=None, bound_ok=None)
                row.update(bound_k=bounds[0], bound_k1=bounds[1], bound_k2=bounds[2])
                rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# posterior errors
# ---------------------------------------------------------------------------


def derivative_observations(ds: Dataset, dim: int, system: OdeSystem, gamma: float,
                            sigma2: float | None = None) -> DerivObservationSet:
    """State observations of one dimension plus ODE derivatives at the true states.

    Times are rescaled to [0, 1], so derivatives pick up the time scale.
    """
    scale = float(ds.times[-1] - ds.times[0])
    t = (ds.times - ds.times[0]) / scale
    F = scale * system.f(ds.states_true, system.true_theta)[:, dim]
    s2 = float(ds.noise_variances[dim]) if sigma2 is None else sigma2
    return DerivObservationSet(t, ds.y[:, dim], F, max(s2, 1e-12), gamma)


def posterior_errors_at(obs: DerivObservationSet, h: RbfHyperparams, fmap, taus) -> np.ndarray:
    """(len(taus), 4) absolute errors |approx - exact| of (mu, Sigma, mu', Sigma')."""
    exact = ExactPosterior(obs, h).query(taus)
    if fmap is None:
        return np.zeros_like(exact)
    return np.abs(FeaturePosterior(obs, fmap).query(taus) - exact)


EXACT_CEILING = 2000


def posterior_error_sweep(obs: DerivObservationSet, h: RbfHyperparams, kinds, orders, taus, seeds=(0,)):
    """Rows (kind, m, tau, e_mu, e_sigma, e_mu1, e_sigma1) with quantiles over seeds.

    QFF is deterministic, so its quantiles collapse to the single value.
    """
    if obs.n > EXACT_CEILING:
        raise ValueError(f"exact reference limited to N <= {EXACT_CEILING}, got {obs.n}")
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    exact = ExactPosterior(obs, h).query(taus)
    rows = []
    for kind in kinds:
        for m in orders:
            if kind == "exact":
                per = np.zeros((1,) + exact.shape)
            elif kind == "qff":
                per = np.abs(FeaturePosterior(obs, qff_map(h, m)).query(taus) - exact)[None]
            else:
                per = np.array([np.abs(FeaturePosterior(obs, make_feature_map(kind, h, 2 * m, s)).query(taus)
                                       - exact) for s in seeds])
            med = np.median(per, axis=0)
            lo, hi = np.percentile(per, [20, 80], axis=0)
            for j, tau in enumerate(taus):
                rows.append({"kind": kind, "m": m, "tau": float(tau),
                             "e_mu": med[j, 0], "e_sigma": med[j, 1], "e_mu1": med[j, 2], "e_sigma1": med[j, 3],
                             "e_tot_lo": float(lo[j].max()), "e_tot_hi": float(hi[j].max())})
    return rows


# ---------------------------------------------------------------------------
# ODIN runs
# ---------------------------------------------------------------------------


@dataclass
class OdinRunSpec:
    """One parameter-inference run on one dataset.

    ``kind`` is ``exact`` or a feature kind; ``count`` is the QFF order or the
    random feature dimension.  ``hyper`` fixes the per-dimension GP
    hyperparameters; otherwise they are fitted (exactly, or with
    ``fit_order`` QFF features when given).
    """

    kind: str = "qff"
    count: int = 40
    seed: int = 0
    hyper: tuple | None = None
    fit_order: int | None = None
    learn_gamma: bool = False
    gamma: float | None = None
    theta0: tuple | None = None
    max_iter: int = 5000
    timing_repeats: int = 0


def fit_dataset_hyper(ds: Dataset, fit_order=None):
    scale = float(ds.times[-1] - ds.times[0])
    t = (ds.times - ds.times[0]) / scale
    return tuple(fit_hyperparams(ds.y[:, k], t, order=fit_order) for k in range(ds.y.shape[1]))


def build_problem(system: OdeSystem, ds: Dataset, spec: OdinRunSpec) -> OdinProblem:
    hyper = spec.hyper
    if hyper is not None:
        hyper = tuple(h if isinstance(h, DimHyperparams) else DimHyperparams(*h) for h in hyper)
    gamma = None if spec.gamma is None else np.full(system.state_dim, float(spec.gamma))
    return OdinProblem.from_dataset(system, ds, hyper=hyper, gamma=gamma, learn_gamma=spec.learn_gamma,
                                    feature_order=spec.fit_order)


def feature_maps_for(problem: OdinProblem, kind: str, count: int, seed: int = 0):
    if kind == "qff":
        return qff_maps_for(problem, count)
    return [make_feature_map(kind, h.kernel, count, seed + 7919 * k) for k, h in enumerate(problem.hyper)]


def run_odin(system: OdeSystem, ds: Dataset, spec: OdinRunSpec, problem: OdinProblem | None = None) -> dict:
    """Fit parameters and report theta, tRMSE, risk trace and timings.

    The optimiser starts at x = y and theta = 1 (or ``spec.theta0``).
    Failures are reported in the ``status`` field instead of raised.
    """
    t_start = time.perf_counter()
    p = problem or build_problem(system, ds, spec)
    maps = None if spec.kind == "exact" else feature_maps_for(p, spec.kind, spec.count, spec.seed)
    theta0 = np.ones(system.param_dim) if spec.theta0 is None else np.asarray(spec.theta0, dtype=float)
    out = {"kind": spec.kind, "count": spec.count, "seed": spec.seed, "n": ds.n,
           "hyper": [(h.rho, h.lengthscale, h.sigma2) for h in p.hyper]}
    try:
        res = optimize(p, maps, ds.y, theta0, OptimizeOptions(max_iter=spec.max_iter))
    except (OptimizerError, np.linalg.LinAlgError) as exc:
        out.update(status=f"optimizer failure: {exc}", theta=[np.nan] * system.param_dim, trmse=np.nan)
        return out
    out.update(theta=res.theta.tolist(), gamma=res.gamma.tolist(), n_iter=res.n_iter, converged=res.converged,
               message=res.message, risk_trace=res.risk_trace, final_risk=res.final_risk)
    try:
        out["trmse"] = trajectory_rmse(system, res.theta, ds)
        out["status"] = "ok"
    except MetricError as exc:
        out["trmse"] = np.nan
        out["status"] = f"metric failure: {exc}"
    if spec.timing_repeats:
        ts = time_risk_iteration(p, maps, res.x, res.theta, repeats=spec.timing_repeats)
        out["iter_time_median"] = float(np.median(ts))
        out["iter_time_std"] = float(np.std(ts))
    out["wall_time"] = time.perf_counter() - t_start
    return out


def quantile_summary(values, lo=20, hi=80):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"median": np.nan, "q_lo": np.nan, "q_hi": np.nan, "n_ok": 0}
    q = np.percentile(v, [lo, 50, hi])
    return {"median": float(q[1]), "q_lo": float(q[0]), "q_hi": float(q[2]), "n_ok": int(v.size)}


# ---------------------------------------------------------------------------
# scaling benchmarks
# ---------------------------------------------------------------------------


def loglog_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def synthetic_timing_problem(n, K=2, rho=1.0, l=0.2, sigma2=0.01, seed=0):
    from .systems import get_system
    system = get_system("lv")
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, n)
    y = np.column_stack([np.sin(2 * np.pi * t) + 2, np.cos(2 * np.pi * t) + 2]) + 0.1 * rng.standard_normal((n, K))
    hyper = tuple(DimHyperparams(rho, l, sigma2) for _ in range(K))
    p = OdinProblem(system, t, y, hyper, np.full(K, sigma2), np.full(K, 1e-6 * rho))
    return p, y, rng.uniform(0.5, 2.0, system.param_dim)


def bench_scaling(mode: str, ladder, fixed: int, repeats=15, exact=False):
    """Per-iteration risk+gradient time along a ladder of N or m.

    ``mode='observations'`` varies N at fixed order ``fixed``; ``mode='features'``
    varies the order at fixed N.  Returns (rows, slope).
    """
    ladder = list(ladder)
    if len(ladder) < 3:
        raise ValueError("a scaling ladder needs at least 3 points")
    if mode not in ("observations", "features"):
        raise ValueError(f"mode must be 'observations' or 'features', got {mode!r}")
    rows = []
    for v in ladder:
        n, m = (v, fixed) if mode == "observations" else (fixed, v)
        p, x, theta = synthetic_timing_problem(n)
        maps = None if exact else qff_maps_for(p, m)
        ts = time_risk_iteration(p, maps, x, theta, repeats=repeats)
        rows.append({"mode": mode, "n": n, "m": m, "exact": exact,
                     "time_median": float(np.median(ts)), "time_std": float(np.std(ts))})
    slope = loglog_slope(ladder, [r["time_median"] for r in rows])
    return rows, slope
