"""Benchmark ODE systems, integration, noisy datasets and trajectory metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .features import rng_from_seed

RTOL = 1e-8
ATOL = 1e-9


class IntegrationError(RuntimeError):
    def __init__(self, message, t_fail=None):
        super().__init__(message if t_fail is None else f"{message} (t = {t_fail:.6g})")
        self.t_fail = t_fail


class InadmissibleStateError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OdeSystem:
    """Parametric dynamics ``f(X, theta)``.

    ``dynamics`` takes an ``(n, K)`` array of states and returns ``(n, K)``;
    it must accept complex input (Jacobians use complex-step differentiation).
    ``admissible`` is only enforced during integration.
    """

    name: str
    state_dim: int
    param_dim: int
    dynamics: Callable
    true_theta: np.ndarray
    x0: np.ndarray
    t_end: float
    admissible: Callable | None = None
    jacobians: Callable | None = None
    inputs: np.ndarray | None = None

    def f(self, X, theta):
        X = np.atleast_2d(X)
        return self.dynamics(X, np.asarray(theta))

    def jac(self, X, theta):
        """(df/dx of shape (n, K, K), df/dtheta of shape (n, K, P))."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.asarray(theta, dtype=float)
        if self.jacobians is not None:
            return self.jacobians(X, theta)
        return complex_step_jacobians(self.dynamics, X, theta)


def complex_step_jacobians(fn, X, theta, h=1e-30):
    n, K = X.shape
    P = theta.size
    Jx = np.empty((n, K, K))
    Jt = np.empty((n, K, P))
    Xc = X.astype(complex)
    for k in range(K):
        Xc[:, k] += 1j * h
        Jx[:, :, k] = fn(Xc, theta.astype(complex)).imag / h
        Xc[:, k] = X[:, k]
    tc = theta.astype(complex)
    for p in range(P):
        tc[p] += 1j * h
        Jt[:, :, p] = fn(X.astype(complex), tc).imag / h
        tc[p] = theta[p]
    return Jx, Jt


# Lotka-Volterra ------------------------------------------------------------

def _lv(X, th):
    x1, x2 = X[:, 0], X[:, 1]
    return np.column_stack([th[0] * x1 - th[1] * x1 * x2, -th[2] * x2 + th[3] * x1 * x2])


def _lv_jac(X, th):
    x1, x2 = X[:, 0], X[:, 1]
    n = X.shape[0]
    Jx = np.empty((n, 2, 2))
    Jx[:, 0, 0] = th[0] - th[1] * x2
    Jx[:, 0, 1] = -th[1] * x1
    Jx[:, 1, 0] = th[3] * x2
    Jx[:, 1, 1] = -th[2] + th[3] * x1
    Jt = np.zeros((n, 2, 4))
    Jt[:, 0, 0] = x1
    Jt[:, 0, 1] = -x1 * x2
    Jt[:, 1, 2] = -x2
    Jt[:, 1, 3] = x1 * x2
    return Jx, Jt


def lv_first_integral(X, th):
    """Conserved quantity of Lotka-Volterra along exact trajectories."""
    X = np.atleast_2d(X)
    return th[3] * X[:, 0] - th[2] * np.log(X[:, 0]) + th[1] * X[:, 1] - th[0] * np.log(X[:, 1])


# Protein transduction ------------------------------------------------------

def _pt(X, th):
    S, dS, R, RS, Rpp = X.T
    mm = th[4] * Rpp / (th[5] + Rpp)
    return np.column_stack([
        -th[0] * S - th[1] * S * R + th[2] * RS,
        th[0] * S,
        -th[1] * S * R + th[2] * RS + mm,
        th[1] * S * R - th[2] * RS - th[3] * RS,
        th[3] * RS - mm,
    ])


def _pt_admissible(X, th):
    Rpp = np.real(X[:, 4])
    if np.any(Rpp <= -np.real(th[5]) / 2):
        raise InadmissibleStateError("protein transduction: R_pp left the admissible region R_pp > -theta_6/2")


# Lorenz 63 -----------------------------------------------------------------

def _lorenz(X, th):
    x, y, z = X.T
    return np.column_stack([th[0] * (y - x), x * (th[1] - z) - y, x * y - th[2] * z])


# Quadrocopter --------------------------------------------------------------

QUADRO_INPUTS = np.array([0.248, 0.2475, 0.24775, 0.24775])


def _quadro(X, th, u=QUADRO_INPUTS):
    x0, x1, x2, x3, x4, x5, x6, x7, x8 = (X[:, i] for i in range(9))
    g = th[6]
    s6, c6, s7, c7, s8, c8 = np.sin(x6), np.cos(x6), np.sin(x7), np.cos(x7), np.sin(x8), np.cos(x8)
    out = [
        -g * s7 + x5 * x1 - x4 * x2,
        g * s6 * c7 - x0 * x5 + x2 * x3,
        -(u[0] + u[1] + u[2] + u[3]) / th[0] + g * c6 * c7 + x0 * x4 - th[4] * x1,
        (th[5] * (-u[0] + u[1] + u[2] - u[3]) + (th[2] - th[3] * (th[2] + th[1])) * x4 * x5) / th[1],
        (th[4] * (u[0] - u[1] + u[2] - u[3]) + (th[3] * (th[2] + th[1]) - th[1]) * x3 * x5) / th[2],
        (th[1] - th[2]) * x3 * x4 / (th[3] * (th[2] + th[1])),
        x3 + (x4 * s6 + x5 * c6) * s7 / c7,
        x4 * c6 - x5 * s6,
        (x4 * s6 + x5 * c6) / c7,
        c7 * c8 * x0 + (-c6 * s8 + s6 * s7 * c8) * x1 + (s6 * s8 + c6 * s7 * c8) * x2,
        c7 * s8 * x0 + (c6 * c8 + s6 * s7 * s8) * x1 + (c6 * s7 * s8 - s6 * c8) * x2,
        s7 * x0 - s6 * c7 * x1 - c6 * c7 * x2,
    ]
    return np.column_stack(out)


def _quadro_admissible(X, th):
    if np.any(np.abs(np.cos(np.real(X[:, 7]))) < 1e-6):
        raise InadmissibleStateError("quadrocopter: pitch angle reached the gimbal singularity |cos(x7)| < 1e-6")


SYSTEMS = {
    "lv": OdeSystem("lv", 2, 4, _lv, np.array([2.0, 1.0, 4.0, 1.0]), np.array([5.0, 3.0]), 2.0,
                    jacobians=_lv_jac),
    "pt": OdeSystem("pt", 5, 6, _pt, np.array([0.07, 0.6, 0.05, 0.3, 0.017, 0.3]),
                    np.array([1.0, 0.0, 1.0, 0.0, 0.0]), 50.0, admissible=_pt_admissible),
    "lorenz": OdeSystem("lorenz", 3, 3, _lorenz, np.array([10.0, 28.0, 8.0 / 3.0]), np.ones(3), 1.0),
    "quadro": OdeSystem("quadro", 12, 7, _quadro,
                        np.array([0.1, 0.00062, 0.00113, 0.9, 0.114, 0.0825, 9.85]), np.zeros(12), 15.0,
                        admissible=_quadro_admissible, inputs=QUADRO_INPUTS),
}


def get_system(name: str) -> OdeSystem:
    try:
        return SYSTEMS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


def integrate(sys: OdeSystem, theta, x0, times, rtol=RTOL, atol=ATOL) -> np.ndarray:
    """Dormand-Prince 5(4) solution sampled at ``times`` (which must be sorted, >= 0)."""
    theta = np.asarray(theta, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    times = np.asarray(times, dtype=float)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(x0))):
        raise IntegrationError("non-finite parameters or initial value")

    def rhs(t, x):
        X = x[None, :]
        if sys.admissible is not None:
            sys.admissible(X, theta)
        return sys.dynamics(X, theta)[0]

    t_end = float(times[-1])
    if t_end <= 0:
        return np.repeat(x0[None, :], times.size, axis=0)
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            sol = solve_ivp(rhs, (0.0, t_end), x0, method="RK45", t_eval=times, rtol=rtol, atol=atol)
    except (InadmissibleStateError, FloatingPointError) as exc:
        raise IntegrationError(f"integration of {sys.name} failed: {exc}") from exc
    if sol.status != 0:
        t_fail = float(sol.t[-1]) if sol.t.size else 0.0
        raise IntegrationError(f"integration of {sys.name} failed: {sol.message}", t_fail)
    out = sol.y.T
    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"integration of {sys.name} produced non-finite states")
    return out


@dataclass(frozen=True)
class NoiseSpec:
    """Either an absolute variance or a signal-to-noise ratio (exactly one)."""

    variance: float | None = None
    snr: float | None = None

    def __post_init__(self):
        if (self.variance is None) == (self.snr is None):
            raise ValueError("NoiseSpec needs exactly one of variance or snr")
        if self.variance is not None and self.variance < 0:
            raise ValueError("noise variance must be >= 0")
        if self.snr is not None and not self.snr > 0:
            raise ValueError("snr must be > 0")

    def variances(self, states):
        if self.variance is not None:
            return np.full(states.shape[1], float(self.variance))
        return np.var(states, axis=0) / self.snr

    def to_dict(self):
        return {"variance": self.variance} if self.variance is not None else {"snr": self.snr}


@dataclass(frozen=True, eq=False)
class Dataset:
    system: str
    times: np.ndarray
    states_true: np.ndarray
    y: np.ndarray
    noise_variances: np.ndarray
    noise_spec: NoiseSpec | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.times.size


def generate_dataset(sys: OdeSystem, N: int, noise_spec: NoiseSpec, seed: int, theta=None) -> Dataset:
    if N < 2:
        raise ValueError("need N >= 2 observations")
    theta = sys.true_theta if theta is None else np.asarray(theta)
    times = np.linspace(0.0, sys.t_end, N)
    states = integrate(sys, theta, sys.x0, times)
    var = noise_spec.variances(states)
    rng = rng_from_seed(seed)
    y = states + rng.standard_normal(states.shape) * np.sqrt(var)
    return Dataset(sys.name, times, states, y, var, noise_spec, int(seed))


class MetricError(RuntimeError):
    pass


def trajectory_rmse(sys: OdeSystem, theta_hat, dataset: Dataset) -> float:
    """(1/N) * ||x_tilde - x_true||_2 with x_tilde integrated from the true x(0).

    The 1/N prefactor (not 1/sqrt(N)) is deliberate.
    """
    try:
        xt = integrate(sys, theta_hat, sys.x0, dataset.times)
    except IntegrationError as exc:
        raise MetricError(f"tRMSE undefined: {exc}") from exc
    return float(np.linalg.norm(xt - dataset.states_true) / dataset.n)


# serialisation ---------------------------------------------------------------

def _header(K):
    return ["time"] + [f"x_{k}" for k in range(K)] + [f"y_{k}" for k in range(K)]


def dataset_to_text(ds: Dataset) -> str:
    K = ds.states_true.shape[1]
    buf = io.StringIO()
    buf.write(",".join(_header(K)) + "\n")
    rows = np.column_stack([ds.times, ds.states_true, ds.y])
    for row in rows:
        buf.write(",".join(format(v, ".17g") for v in row) + "\n")
    return buf.getvalue()


def dataset_from_text(text: str, system: str = "", noise_variances=None) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    K = (len(header) - 1) // 2
    if header != _header(K):
        raise ValueError(f"unexpected dataset header {header!r}")
    rows = np.array([[float(v) for v in row] for row in reader if row])
    var = np.full(K, np.nan) if noise_variances is None else np.asarray(noise_variances, dtype=float)
    return Dataset(system, rows[:, 0].copy(), rows[:, 1:1 + K].copy(), rows[:, 1 + K:].copy(), var)


def dataset_to_records(ds: Dataset) -> dict:
    return {
        "system": ds.system,
        "seed": ds.seed,
        "noise_spec": None if ds.noise_spec is None else ds.noise_spec.to_dict(),
        "noise_variances": ds.noise_variances.tolist(),
        "records": [
            {"time": float(t), "x": list(map(float, x)), "y": list(map(float, y))}
            for t, x, y in zip(ds.times, ds.states_true, ds.y)
        ],
    }


def dataset_from_records(obj: dict) -> Dataset:
    rec = obj["records"]
    spec = obj.get("noise_spec")
    return Dataset(
        obj.get("system", ""),
        np.array([r["time"] for r in rec], dtype=float),
        np.array([r["x"] for r in rec], dtype=float),
        np.array([r["y"] for r in rec], dtype=float),
        np.array(obj["noise_variances"], dtype=float),
        None if spec is None else NoiseSpec(**spec),
        obj.get("seed"),
    )


def save_dataset(ds: Dataset, path) -> Path:
    """Write ``.csv`` (column text) or ``.json`` (records) by suffix."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(dataset_to_records(ds)))
    else:
        path.write_text(dataset_to_text(ds))
    return path


def load_dataset(path, system: str = "", noise_variances=None) -> Dataset:
    path = Path(path)
    if path.suffix == ".json":
        return dataset_from_records(json.loads(path.read_text()))
    return dataset_from_text(path.read_text(), system, noise_variances)
