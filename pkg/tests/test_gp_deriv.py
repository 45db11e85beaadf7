import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleipnir.bounds import min_order_gprd
from sleipnir.experiments import loglog_slope
from sleipnir.features import qff_map
from sleipnir.gp_deriv import (
    DerivObservationSet,
    ExactPosterior,
    FeaturePosterior,
    approx_posterior,
    exact_posterior,
    posterior_errors,
)
from sleipnir.kernels import RbfHyperparams


def joint_conditioning_oracle(obs, rho, l, tau):
    """Condition the joint Gaussian of (f(t), f'(t), f(tau), f'(tau)) directly."""
    pts = np.concatenate([obs.times, obs.times, [tau, tau]])
    der = np.concatenate([np.zeros(obs.n), np.ones(obs.n), [0, 1]]).astype(bool)
    a, b = pts[:, None], pts[None, :]
    r = a - b
    e = rho * np.exp(-r * r / (2 * l * l))
    cov = np.where(~der[:, None] & ~der[None, :], e, 0.0)
    cov = np.where(der[:, None] & ~der[None, :], -r / l ** 2 * e, cov)    # cov(f'(a), f(b))
    cov = np.where(~der[:, None] & der[None, :], r / l ** 2 * e, cov)     # cov(f(a), f'(b))
    cov = np.where(der[:, None] & der[None, :], (1 / l ** 2 - r * r / l ** 4) * e, cov)
    n2 = 2 * obs.n
    K = cov[:n2, :n2] + np.diag(np.concatenate([np.full(obs.n, obs.sigma2), np.full(obs.n, obs.gamma)]))
    kq = cov[:n2, n2:]
    sol = np.linalg.solve(K, np.column_stack([np.concatenate([obs.y, obs.F]), kq]))
    mean = kq.T @ sol[:, 0]
    var = cov[n2:, n2:] - kq.T @ sol[:, 1:]
    return np.array([mean[0], var[0, 0], mean[1], var[1, 1]])


def smooth_obs(n, sigma2=1e-3, gamma=1e-2, seed=0, noise=True):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, n)
    y = np.sin(4 * t) + 0.5 * np.cos(7 * t)
    F = 4 * np.cos(4 * t) - 3.5 * np.sin(7 * t)
    if noise:
        y = y + np.sqrt(sigma2) * rng.standard_normal(n)
        F = F + np.sqrt(gamma) * rng.standard_normal(n)
    return DerivObservationSet(t, y, F, sigma2, gamma)


def test_observation_set_validation():
    with pytest.raises(ValueError):
        DerivObservationSet([0, 1], [1, 2], [1], 0.1, 0.1)
    with pytest.raises(ValueError):
        DerivObservationSet([0], [1], [1], 0.0, 0.1)


def test_single_point_hand_solution():
    # K_hat = diag(1.1, 1.1) since 'k(0) = 0; k_hat(0, 0) = [1, 0]
    obs = DerivObservationSet([0.0], [1.0], [0.0], 0.1, 0.1)
    q = exact_posterior(obs, RbfHyperparams(1.0, 1.0), 0.0)
    assert q.mu == pytest.approx(1 / 1.1)
    assert q.sigma == pytest.approx(1 - 1 / 1.1)
    assert q.mu_prime == pytest.approx(0.0, abs=1e-15)
    assert q.sigma_prime == pytest.approx(1 - 1 / 1.1)


@pytest.mark.parametrize("tau", [0.0, 0.35, 1.2])
def test_exact_matches_joint_conditioning(tau):
    obs = smooth_obs(6, sigma2=0.05, gamma=0.2)
    got = ExactPosterior(obs, RbfHyperparams(1.3, 0.4)).query(tau)[0]
    np.testing.assert_allclose(got, joint_conditioning_oracle(obs, 1.3, 0.4, tau), rtol=1e-8, atol=1e-10)


def test_prior_limit():
    obs = smooth_obs(20)
    big = DerivObservationSet(obs.times, obs.y, obs.F, 1e12, 1e12)
    h = RbfHyperparams(2.0, 0.3)
    for post in (ExactPosterior(big, h), FeaturePosterior(big, qff_map(h, 40))):
        q = post.query([0.1, 0.6])
        assert np.all(np.abs(q[:, 0]) < 1e-6 * 2.0)
        np.testing.assert_allclose(q[:, 1], 2.0, atol=1e-6 * 2.0)


def test_near_noiseless_interpolation():
    obs = smooth_obs(30, sigma2=1e-8, gamma=1e-8, noise=False)
    mu = ExactPosterior(obs, RbfHyperparams(1.0, 0.3)).query(obs.times)[:, 0]
    assert np.max(np.abs(mu - obs.y)) < 1e-3


@pytest.mark.parametrize("m", [64, 128])
def test_feature_route_matches_exact(m):
    obs = smooth_obs(100)
    h = RbfHyperparams(1.0, 0.2)
    taus = np.linspace(0, 1, 21)
    err = posterior_errors(ExactPosterior(obs, h).query(taus), FeaturePosterior(obs, qff_map(h, m)).query(taus))
    assert err.max() < 1e-8


def test_scalar_wrappers_agree_with_batched():
    obs = smooth_obs(15)
    h = RbfHyperparams(1.0, 0.2)
    fmap = qff_map(h, 48)
    q = approx_posterior(obs, fmap, 0.3)
    np.testing.assert_array_equal(q.as_array(), FeaturePosterior(obs, fmap).query(0.3)[0])


def test_errors_decay_with_order():
    obs = smooth_obs(100)
    h = RbfHyperparams(1.0, 0.2)
    taus = np.linspace(0, 1, 11)
    exact = ExactPosterior(obs, h).query(taus)
    e = [posterior_errors(exact, FeaturePosterior(obs, qff_map(h, m)).query(taus)).max() for m in (12, 20, 28, 36)]
    assert all(b < a / 10 for a, b in zip(e, e[1:]))


@pytest.mark.parametrize("seed", [0, 1])
def test_minimum_order_meets_tolerance(seed):
    obs = smooth_obs(50, sigma2=1e-2, gamma=1e-2, seed=seed)
    h = RbfHyperparams(1.0, 0.25)
    C = 1e-2
    R = max(np.abs(obs.y).max(), np.abs(obs.F).max())
    m = min_order_gprd(0.25, 1.0, obs.n, min(obs.sigma2, obs.gamma), R, C)
    taus = np.linspace(0, 1, 101)
    err = posterior_errors(ExactPosterior(obs, h).query(taus), FeaturePosterior(obs, qff_map(h, m)).query(taus))
    assert err.max() <= C


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6), l=st.floats(0.1, 1.0), rho=st.floats(0.3, 5.0),
       tau=st.floats(-0.5, 1.5))
def test_variances_non_negative_and_below_prior(seed, l, rho, tau):
    obs = smooth_obs(25, seed=seed)
    h = RbfHyperparams(rho, l)
    for post in (ExactPosterior(obs, h), FeaturePosterior(obs, qff_map(h, 64))):
        _, s, _, sp = post.query(tau)[0]
        assert -1e-9 * rho <= s <= rho * (1 + 1e-9)
        assert -1e-9 * rho <= sp <= rho / l ** 2 * (1 + 1e-9)


def test_feature_runtime_linear_in_n():
    h = RbfHyperparams(1.0, 0.2)
    fmap = qff_map(h, 32)
    ladder = [1000, 2000, 4000, 8000]
    times = []
    for n in ladder:
        obs = smooth_obs(n)
        best = np.inf
        for _ in range(5):
            t0 = time.perf_counter()
            FeaturePosterior(obs, fmap).query([0.5])
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = loglog_slope(ladder, times)
    assert 1 / 1.5 <= slope <= 1.5
