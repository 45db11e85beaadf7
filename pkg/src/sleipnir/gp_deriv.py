"""GP regression with noisy state and derivative observations.

``exact_posterior`` solves the full 2N x 2N block system.  ``FeaturePosterior``
works in weight space: with Psi = [Phi | Phi'] (D x 2N) and noise
Lambda = diag(sigma2 I, gamma I) the posterior only needs the D x D matrix
I + Psi Lambda^-1 Psi^T, factorised once and reused for every query time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.linalg import solve_triangular

from .kernels import (
    RbfHyperparams,
    cho_solve,
    cholesky,
    kernel_d1,
    kernel_d2,
    kernel_eval,
)


@dataclass(frozen=True, eq=False)
class DerivObservationSet:
    times: np.ndarray
    y: np.ndarray
    F: np.ndarray
    sigma2: float
    gamma: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        F = np.asarray(self.F, dtype=float).ravel()
        if not (t.size == y.size == F.size) or t.size == 0:
            raise ValueError(f"times, y, F must have equal non-zero length, got {t.size}, {y.size}, {F.size}")
        if not (self.sigma2 > 0 and self.gamma > 0):
            raise ValueError("noise variances sigma2 and gamma must be positive")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "F", F)

    @property
    def n(self):
        return self.times.size


@dataclass(frozen=True)
class PosteriorQuery:
    tau: float
    mu: float
    sigma: float
    mu_prime: float
    sigma_prime: float

    def as_array(self):
        return np.array([self.mu, self.sigma, self.mu_prime, self.sigma_prime])


class ExactPosterior:
    """Reference posterior from the 2N x 2N system."""

    def __init__(self, obs: DerivObservationSet, h: RbfHyperparams):
        self.obs = obs
        self.h = h
        t = obs.times
        r = t[:, None] - t[None, :]
        n = obs.n
        C = kernel_eval(h, r)
        pC = kernel_d1(h, r)
        K = np.empty((2 * n, 2 * n))
        K[:n, :n] = C + obs.sigma2 * np.eye(n)
        K[:n, n:] = -pC          # C' (second-argument derivative)
        K[n:, :n] = pC           # 'C
        K[n:, n:] = kernel_d2(h, r) + obs.gamma * np.eye(n)
        self._L = cholesky(K, "the 2N x 2N GP-derivative covariance")
        self._alpha = cho_solve(self._L, np.concatenate([obs.y, obs.F]))

    def _cross(self, tau):
        # columns: k_hat(t, T) and k_hat'(t, T) for every query T
        r = self.obs.times[:, None] - np.atleast_1d(tau)[None, :]
        kh = np.vstack([kernel_eval(self.h, r), kernel_d1(self.h, r)])
        khp = np.vstack([-kernel_d1(self.h, r), kernel_d2(self.h, r)])
        return kh, khp

    def query(self, tau) -> np.ndarray:
        """Array of shape (len(tau), 4): mu, Sigma, mu', Sigma'."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        kh, khp = self._cross(tau)
        mu = kh.T @ self._alpha
        mup = khp.T @ self._alpha
        v = _tri(self._L, kh)
        vp = _tri(self._L, khp)
        sig = self.h.rho - np.sum(v * v, axis=0)
        sigp = self.h.rho / self.h.lengthscale ** 2 - np.sum(vp * vp, axis=0)
        return np.column_stack([mu, sig, mup, sigp])


def _tri(L, B):
    return solve_triangular(L, B, lower=True, check_finite=False)


class FeaturePosterior:
    """Weight-space posterior for any feature map with a ``matrices`` method."""

    def __init__(self, obs: DerivObservationSet, fmap):
        self.obs = obs
        self.fmap = fmap
        fm = fmap.matrices(obs.times)
        Psi = np.hstack([fm.Phi, fm.PhiPrime])
        w = np.concatenate([np.full(obs.n, 1.0 / obs.sigma2), np.full(obs.n, 1.0 / obs.gamma)])
        M = (Psi * w) @ Psi.T
        M[np.diag_indices_from(M)] += 1.0
        self._L = cholesky(M, "I + Psi Lambda^-1 Psi^T")
        self._mean_w = cho_solve(self._L, Psi @ (w * np.concatenate([obs.y, obs.F])))

    def query(self, tau) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        fm = self.fmap.matrices(tau)
        mu = fm.Phi.T @ self._mean_w
        mup = fm.PhiPrime.T @ self._mean_w
        v = _tri(self._L, fm.Phi)
        vp = _tri(self._L, fm.PhiPrime)
        return np.column_stack([mu, np.sum(v * v, axis=0), mup, np.sum(vp * vp, axis=0)])


def _as_query(tau, row):
    return PosteriorQuery(float(tau), *map(float, row))


def exact_posterior(obs: DerivObservationSet, h: RbfHyperparams, tau: float) -> PosteriorQuery:
    return _as_query(tau, ExactPosterior(obs, h).query(tau)[0])


def approx_posterior(obs: DerivObservationSet, fmap, tau: float) -> PosteriorQuery:
    return _as_query(tau, FeaturePosterior(obs, fmap).query(tau)[0])


def posterior_errors(exact: np.ndarray, approx: np.ndarray) -> np.ndarray:
    """Absolute errors e_mu, e_Sigma, e_mu', e_Sigma' (same layout as ``query``)."""
    return np.abs(np.asarray(exact) - np.asarray(approx))
