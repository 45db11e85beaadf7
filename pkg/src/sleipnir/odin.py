"""ODIN risk for ODE parameter inference and its QFF (SLEIPNIR) approximation.

Per state dimension k, with P = (C + lam I)^-1, D = 'C P, A = C'' - 'C P C'
and z = T f_k(X, theta) - D x_k (T is the time rescaling factor):

    R_k = x_k^T P x_k + |x_k - y_k|^2 / sigma_k^2 + z^T (A + gamma_k I)^-1 z
          [+ log det(A + gamma_k I) when gamma is learned]

The exact model factorises N x N matrices.  The feature model replaces
C, 'C, C', C'' by Phi^T Phi, Phi'^T Phi, Phi^T Phi', Phi'^T Phi' and applies
the matrix inversion lemma, so every solve is on a D x D system (D = feature
dimension) and an evaluation costs O(N D^2 + D^3).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .kernels import (
    RbfHyperparams,
    cho_solve,
    cholesky,
    gram_matrices,
    logdet_from_cholesky,
    model_matrices,
)
from .systems import Dataset, OdeSystem

# ---------------------------------------------------------------------------
# problem definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DimHyperparams:
    rho: float
    lengthscale: float
    sigma2: float

    @property
    def kernel(self):
        return RbfHyperparams(self.rho, self.lengthscale)


@dataclass(frozen=True, eq=False)
class OdinProblem:
    """Observations on a [0, 1] time grid plus everything the risk needs.

    ``time_scale`` is the length of the original observation window; the
    model derivative in rescaled time is ``time_scale * f``.
    """

    system: OdeSystem
    times: np.ndarray
    y: np.ndarray
    hyper: tuple
    gamma: np.ndarray
    jitter: np.ndarray
    time_scale: float = 1.0
    learn_gamma: bool = False
    gamma_bounds: tuple = (1e-6, 1e3)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        t = np.asarray(self.times, dtype=float).ravel()
        if y.shape[0] != t.size:
            raise ValueError("y must have one row per time point")
        K = y.shape[1]
        if len(self.hyper) != K:
            raise ValueError(f"need {K} per-dimension hyperparameter sets, got {len(self.hyper)}")
        gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (K,)).copy()
        jitter = np.broadcast_to(np.asarray(self.jitter, dtype=float), (K,)).copy()
        if np.any(gamma <= 0) or np.any(jitter <= 0):
            raise ValueError("gamma and jitter must be positive")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "hyper", tuple(self.hyper))
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "jitter", jitter)

    @property
    def n(self):
        return self.times.size

    @property
    def state_dim(self):
        return self.y.shape[1]

    def rhs(self, x, theta):
        return self.time_scale * self.system.f(x, theta)

    def rhs_jac(self, x, theta):
        Jx, Jt = self.system.jac(x, theta)
        return self.time_scale * Jx, self.time_scale * Jt

    @classmethod
    def from_dataset(cls, system: OdeSystem, ds: Dataset, hyper=None, gamma=None, learn_gamma=False,
                     jitter_rel=1e-6, feature_order=None, **kw):
        """Rescale times to [0, 1] and (optionally) fit hyperparameters per dimension."""
        t0, t1 = float(ds.times[0]), float(ds.times[-1])
        scale = t1 - t0
        times = (ds.times - t0) / scale
        if hyper is None:
            hyper = tuple(fit_hyperparams(ds.y[:, k], times, order=feature_order) for k in range(ds.y.shape[1]))
        hyper = tuple(hyper)
        if gamma is None:
            gamma = np.array([h.sigma2 for h in hyper])
        jitter = np.array([jitter_rel * h.rho for h in hyper])
        return cls(system, times, ds.y, hyper, gamma, jitter, scale, learn_gamma, **kw)


@dataclass(frozen=True)
class RiskValue:
    total: float
    prior_term: float
    obs_term: float
    deriv_term: float
    logdet_term: float = 0.0


class OptimizerError(RuntimeError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


# ---------------------------------------------------------------------------
# per-dimension linear algebra blocks
# ---------------------------------------------------------------------------


class _GammaFactor:
    """Q = (A + gamma I)^-1 applied to vectors, with log det and trace."""

    __slots__ = ("apply", "logdet", "trace")

    def __init__(self, apply, logdet, trace):
        self.apply = apply
        self.logdet = logdet
        self.trace = trace


class ExactBlock:
    """Dense N x N route: Cholesky of C + lam I and A + gamma I."""

    def __init__(self, times, h: RbfHyperparams, jitter: float):
        km = gram_matrices(h, times)
        n = len(times)
        self._Lc = cholesky(km.C + jitter * np.eye(n), "C + jitter*I", jitter=jitter)
        mm = model_matrices(km, jitter)
        self.D = mm.D
        self.A = mm.A

    def prior(self, v):
        return cho_solve(self._Lc, v)

    def d(self, v):
        return self.D @ v

    def dt(self, v):
        return self.D.T @ v

    def gamma_factor(self, gamma, need_trace=False):
        n = self.A.shape[0]
        L = cholesky(self.A + gamma * np.eye(n), "A + gamma*I")
        trace = None
        if need_trace:
            Linv = solve_triangular(L, np.eye(n), lower=True, check_finite=False)
            trace = float(np.sum(Linv * Linv))
        return _GammaFactor(lambda v: cho_solve(L, v), logdet_from_cholesky(L), trace)


class FeatureBlock:
    """Low-rank route built from feature matrices Phi, Phi' (D x N)."""

    def __init__(self, times, fmap, jitter: float):
        fm = fmap.matrices(times)
        self.Phi = fm.Phi
        self.PhiP = fm.PhiPrime
        self.jitter = jitter
        self.n = fm.Phi.shape[1]
        self.dim = fm.Phi.shape[0]
        self.G = self.Phi @ self.Phi.T
        self.Gp = self.PhiP @ self.PhiP.T
        eye = np.eye(self.dim)
        self._L1 = cholesky(self.G + jitter * eye, "Phi Phi^T + jitter*I", jitter=jitter)
        self._logdet1 = logdet_from_cholesky(self._L1)

    def prior(self, v):
        # (Phi^T Phi + lam I)^-1 v = (v - Phi^T (G + lam I)^-1 Phi v) / lam
        return (v - self.Phi.T @ cho_solve(self._L1, self.Phi @ v)) / self.jitter

    def d(self, v):
        return self.PhiP.T @ cho_solve(self._L1, self.Phi @ v)

    def dt(self, v):
        return self.Phi.T @ cho_solve(self._L1, self.PhiP @ v)

    def gamma_factor(self, gamma, need_trace=False):
        lam = self.jitter
        M = self.Gp + (gamma / lam) * self.G
        M[np.diag_indices_from(M)] += gamma
        L2 = cholesky(M, "Phi' Phi'^T + (gamma/lam) Phi Phi^T + gamma*I")
        PhiP = self.PhiP

        def apply(v):
            return (v - PhiP.T @ cho_solve(L2, PhiP @ v)) / gamma

        # det(gamma I_N + Phi'^T B Phi') with B = lam (G + lam I)^-1
        logdet = ((self.n - self.dim) * np.log(gamma) + self.dim * np.log(lam)
                  - self._logdet1 + logdet_from_cholesky(L2))
        trace = None
        if need_trace:
            trace = float((self.n - np.trace(cho_solve(L2, self.Gp))) / gamma)
        return _GammaFactor(apply, float(logdet), trace)


# ---------------------------------------------------------------------------
# risk models
# ---------------------------------------------------------------------------


class RiskModel:
    """Risk and analytic gradient for a fixed problem and route.

    Blocks are built once; factors of A + gamma I are rebuilt only when gamma
    changes.
    """

    def __init__(self, problem: OdinProblem, blocks):
        self.problem = problem
        self.blocks = list(blocks)
        self._gamma_cache = {}

    def _factor(self, k, gamma, need_trace):
        key = (k, float(gamma))
        fac = self._gamma_cache.get(key)
        if fac is None or (need_trace and fac.trace is None):
            fac = self.blocks[k].gamma_factor(gamma, need_trace=need_trace)
            if len(self._gamma_cache) > 8 * len(self.blocks):
                self._gamma_cache.clear()
            self._gamma_cache[key] = fac
        return fac

    def evaluate(self, x, theta, gamma=None, grad=False):
        """Return ``RiskValue`` or ``(RiskValue, dx, dtheta, dgamma)``.

        ``dgamma`` is the derivative w.r.t. gamma itself (not log gamma) and is
        only non-zero when the problem learns gamma.
        """
        p = self.problem
        x = np.asarray(x, dtype=float).reshape(p.n, p.state_dim)
        theta = np.asarray(theta, dtype=float)
        gamma = p.gamma if gamma is None else np.asarray(gamma, dtype=float)
        fx = p.rhs(x, theta)
        if not np.all(np.isfinite(fx)):
            raise FloatingPointError("ODE right-hand side is not finite at the current iterate")
        prior = obs = deriv = logdet = 0.0
        K = p.state_dim
        gx = np.zeros_like(x) if grad else None
        gq = np.zeros_like(x) if grad else None
        dgamma = np.zeros(K)
        for k in range(K):
            blk = self.blocks[k]
            xk = x[:, k]
            px = blk.prior(xk)
            prior += float(xk @ px)
            res = xk - p.y[:, k]
            obs += float(res @ res) / p.hyper[k].sigma2
            z = fx[:, k] - blk.d(xk)
            fac = self._factor(k, gamma[k], need_trace=grad and p.learn_gamma)
            qz = fac.apply(z)
            deriv += float(z @ qz)
            if p.learn_gamma:
                logdet += fac.logdet
            if grad:
                gx[:, k] = 2.0 * px + 2.0 * res / p.hyper[k].sigma2 - 2.0 * blk.dt(qz)
                gq[:, k] = 2.0 * qz
                if p.learn_gamma:
                    dgamma[k] = fac.trace - float(qz @ qz)
        value = RiskValue(prior + obs + deriv + logdet, prior, obs, deriv, logdet)
        if not grad:
            return value
        Jx, Jt = p.rhs_jac(x, theta)
        # d/dx_i of sum_j gq[i, j] * f_j(x_i)
        gx += np.einsum("ij,ijk->ik", gq, Jx)
        gtheta = np.einsum("ij,ijp->p", gq, Jt)
        return value, gx, gtheta, dgamma


def exact_model(problem: OdinProblem) -> RiskModel:
    blocks = [ExactBlock(problem.times, h.kernel, lam) for h, lam in zip(problem.hyper, problem.jitter)]
    return RiskModel(problem, blocks)


def sleipnir_model(problem: OdinProblem, maps) -> RiskModel:
    maps = list(maps)
    if len(maps) != problem.state_dim:
        raise ValueError(f"need one feature map per state dimension ({problem.state_dim}), got {len(maps)}")
    blocks = [FeatureBlock(problem.times, fm, lam) for fm, lam in zip(maps, problem.jitter)]
    return RiskModel(problem, blocks)


def exact_risk(p: OdinProblem, x, theta, gamma=None) -> RiskValue:
    return exact_model(p).evaluate(x, theta, gamma)


def sleipnir_risk(p: OdinProblem, maps, x, theta, gamma=None) -> RiskValue:
    return sleipnir_model(p, maps).evaluate(x, theta, gamma)


def qff_maps_for(problem: OdinProblem, m: int):
    from .features import qff_map
    return [qff_map(h.kernel, m) for h in problem.hyper]


# ---------------------------------------------------------------------------
# hyperparameter fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperBounds:
    """Box for (rho, l, sigma2).  rho and sigma2 limits are absolute here;
    ``scaled`` builds the default box relative to the data's second moment."""

    rho: tuple = (1e-4, 1e4)
    lengthscale: tuple = (0.02, 2.0)
    sigma2: tuple = (1e-8, 1e4)

    @classmethod
    def scaled(cls, y):
        s = float(np.mean(np.square(y)))
        s = s if s > 0 and np.isfinite(s) else 1.0
        return cls(rho=(1e-4 * s, 1e4 * s), sigma2=(1e-8 * s, 1e4 * s))

    def log_bounds(self):
        return [tuple(np.log(b)) for b in (self.rho, self.lengthscale, self.sigma2)]


class FitError(RuntimeError):
    pass


def log_marginal_likelihood(y, times, rho, lengthscale, sigma2, order=None, grad=False):
    """log N(y | 0, C + sigma2 I), exactly or with a QFF map of the given order.

    With ``grad=True`` (exact route only) also returns the gradient with
    respect to (log rho, log l, log sigma2).
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(times, dtype=float)
    n = y.size
    h = RbfHyperparams(rho, lengthscale)
    if order is None:
        r = t[:, None] - t[None, :]
        E = np.exp(-0.5 * (r / lengthscale) ** 2)
        K = rho * E
        K[np.diag_indices(n)] += sigma2
        L = cholesky(K, "C + sigma2*I")
        alpha = cho_solve(L, y)
        val = -0.5 * float(y @ alpha) - 0.5 * logdet_from_cholesky(L) - 0.5 * n * np.log(2 * np.pi)
        if not grad:
            return val
        W = np.outer(alpha, alpha) - cho_solve(L, np.eye(n))
        dK = (rho * E, rho * E * (r / lengthscale) ** 2, sigma2 * np.eye(n))
        return val, np.array([0.5 * float(np.sum(W * d)) for d in dK])
    from .features import qff_map
    Phi = qff_map(h, order).matrices(t).Phi
    dim = Phi.shape[0]
    M = Phi @ Phi.T
    M[np.diag_indices(dim)] += sigma2
    L = cholesky(M, "Phi Phi^T + sigma2*I")
    b = Phi @ y
    quad = (float(y @ y) - float(b @ cho_solve(L, b))) / sigma2
    logdet = logdet_from_cholesky(L) + (n - dim) * np.log(sigma2)
    val = -0.5 * quad - 0.5 * logdet - 0.5 * n * np.log(2 * np.pi)
    if grad:
        raise NotImplementedError("analytic gradients are only provided for the exact route")
    return val


def fit_hyperparams(y, times, order=None, bounds: HyperBounds | None = None, starts=None,
                    return_trace=False):
    """Maximise the marginal likelihood over log-parameterised (rho, l, sigma2).

    ``order=None`` uses the exact likelihood with analytic gradients; an integer
    uses the QFF approximation of that order (finite-difference gradients)
    with the lengthscale floor raised to sqrt(e / (4 order)).  The best of a small multi-start set is returned.
    Without explicit ``bounds`` the rho and sigma2 box scales with mean(y^2).
    """
    from scipy.optimize import minimize

    y = np.asarray(y, dtype=float)
    t = np.asarray(times, dtype=float)
    if y.size < 3:
        raise FitError("need at least 3 observations to fit hyperparameters")
    if bounds is None:
        bounds = HyperBounds.scaled(y)
    lb = bounds.log_bounds()
    if order is not None:
        # below this lengthscale an order-m rule no longer resolves the kernel
        l_floor = max(bounds.lengthscale[0], np.sqrt(np.e / (4.0 * order)))
        lb[1] = (np.log(min(l_floor, bounds.lengthscale[1])), lb[1][1])
    second_moment = max(float(np.mean(y * y)), bounds.rho[0])
    if starts is None:
        starts = [(second_moment, ls, max(0.01 * second_moment, bounds.sigma2[0]))
                  for ls in (0.05, 0.15, 0.4)]

    def clip(v):
        return np.array([np.clip(v[i], *lb[i]) for i in range(3)])

    def objective(v):
        rho, ls, s2 = np.exp(v)
        try:
            if order is None:
                val, g = log_marginal_likelihood(y, t, rho, ls, s2, grad=True)
                return -val, -g
            return -log_marginal_likelihood(y, t, rho, ls, s2, order=order)
        except np.linalg.LinAlgError:
            return (np.inf, np.zeros(3)) if order is None else np.inf

    trace = []
    best = None
    for s in starts:
        v0 = clip(np.log(np.asarray(s, dtype=float)))
        try:
            res = minimize(objective, v0, jac=order is None, method="L-BFGS-B", bounds=lb)
        except (ValueError, FloatingPointError) as exc:
            trace.append((tuple(np.exp(v0)), str(exc)))
            continue
        trace.append((tuple(np.exp(res.x)), float(res.fun)))
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError(f"all hyperparameter starts failed: {trace}")
    rho, ls, s2 = np.exp(best.x)
    out = DimHyperparams(float(rho), float(ls), float(s2))
    return (out, trace) if return_trace else out


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimizeOptions:
    max_iter: int = 5000
    grad_tol: float = 1e-6
    step_tol: float = 1e-10
    memory: int = 20
    armijo: float = 1e-4
    max_backtracks: int = 60


@dataclass
class OdinResult:
    x: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    risk_trace: list
    n_iter: int
    converged: bool
    message: str
    iter_times: list = field(default_factory=list)
    final_risk: RiskValue | None = None


class _Packing:
    """Flat optimisation vector [x (N*K), theta (P), eta (K if gamma learned)].

    gamma = exp(lo + (hi - lo) * sigmoid(eta)) keeps gamma inside its bounds.
    """

    def __init__(self, p: OdinProblem, n_theta):
        self.p = p
        self.nx = p.n * p.state_dim
        self.nt = n_theta
        self.lo, self.hi = np.log(p.gamma_bounds[0]), np.log(p.gamma_bounds[1])

    def gamma_from_eta(self, eta):
        s = 1.0 / (1.0 + np.exp(-eta))
        return np.exp(self.lo + (self.hi - self.lo) * s), s

    def eta_from_gamma(self, gamma):
        s = (np.log(np.clip(gamma, *self.p.gamma_bounds)) - self.lo) / (self.hi - self.lo)
        s = np.clip(s, 1e-12, 1 - 1e-12)
        return np.log(s / (1 - s))

    def pack(self, x, theta, gamma):
        parts = [np.asarray(x, dtype=float).ravel(), np.asarray(theta, dtype=float)]
        if self.p.learn_gamma:
            parts.append(self.eta_from_gamma(gamma))
        return np.concatenate(parts)

    def unpack(self, v):
        x = v[:self.nx].reshape(self.p.n, self.p.state_dim)
        theta = v[self.nx:self.nx + self.nt]
        if self.p.learn_gamma:
            gamma, _ = self.gamma_from_eta(v[self.nx + self.nt:])
        else:
            gamma = self.p.gamma
        return x, theta, gamma


def optimize(p: OdinProblem, maps, x0, theta0, options: OptimizeOptions | None = None,
             model: RiskModel | None = None, gamma0=None) -> OdinResult:
    """Joint L-BFGS descent over (x, theta[, gamma]) with Armijo backtracking.

    ``maps=None`` selects the exact route.  Stops when the gradient norm drops
    below ``grad_tol * (1 + |R|)``, the accepted step is shorter than
    ``step_tol`` or after ``max_iter`` iterations.
    """
    opts = options or OptimizeOptions()
    if model is None:
        model = exact_model(p) if maps is None else sleipnir_model(p, maps)
    pk = _Packing(p, np.size(theta0))
    v = pk.pack(x0, theta0, p.gamma if gamma0 is None else gamma0)
    if not np.all(np.isfinite(v)):
        raise OptimizerError("initial point is not finite")

    def fg(vec):
        x, theta, gamma = pk.unpack(vec)
        val, gx, gt, dg = model.evaluate(x, theta, gamma, grad=True)
        parts = [gx.ravel(), gt]
        if p.learn_gamma:
            _, s = pk.gamma_from_eta(vec[pk.nx + pk.nt:])
            parts.append(dg * gamma * (pk.hi - pk.lo) * s * (1 - s))
        return val, np.concatenate(parts)

    t0 = time.perf_counter()
    try:
        val, g = fg(v)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise OptimizerError(f"risk evaluation failed at the initial point: {exc}", v) from exc
    f = val.total
    trace = [f]
    times = [time.perf_counter() - t0]
    S, Y = [], []
    converged, message, it = False, "max_iter reached", 0
    for it in range(1, opts.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < opts.grad_tol * (1.0 + abs(f)):
            converged, message = True, "gradient tolerance"
            it -= 1
            break
        t0 = time.perf_counter()
        d = _two_loop(g, S, Y)
        slope = float(g @ d)
        if not slope < 0:
            S.clear()
            Y.clear()
            d = -g
            slope = -gnorm ** 2
        if not S:
            d = d * min(1.0, 1.0 / max(gnorm, 1e-300))
            slope = float(g @ d)
        step = 1.0
        accepted = False
        for _ in range(opts.max_backtracks):
            v_new = v + step * d
            try:
                val_new, g_new = fg(v_new)
                f_new = val_new.total
            except (np.linalg.LinAlgError, FloatingPointError):
                f_new = np.inf
            if np.isfinite(f_new) and f_new <= f + opts.armijo * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if S:
                S.clear()
                Y.clear()
                continue
            message = "line search failed"
            break
        s_vec = v_new - v
        y_vec = g_new - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * float(np.linalg.norm(s_vec) * np.linalg.norm(y_vec)):
            S.append(s_vec)
            Y.append(y_vec)
            if len(S) > opts.memory:
                S.pop(0)
                Y.pop(0)
        v, f, g, val = v_new, f_new, g_new, val_new
        trace.append(f)
        times.append(time.perf_counter() - t0)
        if float(np.linalg.norm(s_vec)) < opts.step_tol * (1.0 + float(np.linalg.norm(v))):
            converged, message = True, "step tolerance"
            break
    if not np.isfinite(f):
        raise OptimizerError("risk became non-finite", v)
    x, theta, gamma = pk.unpack(v)
    return OdinResult(x.copy(), np.array(theta), np.array(gamma), trace, it, converged, message, times, val)


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho))
        q -= a * y
    if S:
        q *= float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
    for (a, rho), s, y in zip(reversed(alphas), S, Y):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def time_risk_iteration(p: OdinProblem, maps, x, theta, repeats=15):
    """Wall time of one full risk + gradient evaluation, rebuilding all factorisations.

    Returns the list of per-repeat times in seconds.
    """
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model = exact_model(p) if maps is None else sleipnir_model(p, maps)
        model.evaluate(x, theta, grad=True)
        out.append(time.perf_counter() - t0)
    return out
