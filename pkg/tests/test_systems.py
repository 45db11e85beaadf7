import json

import numpy as np
import pytest

from sleipnir.systems import (
    SYSTEMS,
    Dataset,
    IntegrationError,
    MetricError,
    NoiseSpec,
    complex_step_jacobians,
    dataset_from_records,
    dataset_from_text,
    dataset_to_records,
    dataset_to_text,
    generate_dataset,
    get_system,
    integrate,
    load_dataset,
    lv_first_integral,
    save_dataset,
    trajectory_rmse,
)

LV = get_system("lv")


def test_registry():
    assert sorted(SYSTEMS) == ["lorenz", "lv", "pt", "quadro"]
    for s in SYSTEMS.values():
        assert s.true_theta.size == s.param_dim and s.x0.size == s.state_dim
        assert s.f(s.x0, s.true_theta).shape == (1, s.state_dim)
    with pytest.raises(KeyError):
        get_system("pendulum")


def test_lv_first_integral_conserved():
    t = np.linspace(0, 2, 500)
    X = integrate(LV, LV.true_theta, LV.x0, t)
    V = lv_first_integral(X, LV.true_theta)
    assert np.max(np.abs(V - V[0])) / abs(V[0]) < 1e-6


def test_lv_zero_parameters_constant():
    t = np.linspace(0, 2, 50)
    X = integrate(LV, np.zeros(4), LV.x0, t)
    np.testing.assert_array_equal(X, np.tile(LV.x0, (50, 1)))


def test_lv_periodic():
    t = np.linspace(0, 6, 6001)
    X = integrate(LV, LV.true_theta, LV.x0, t)
    rel = np.linalg.norm(X - LV.x0, axis=1) / np.linalg.norm(LV.x0)
    assert rel[t > 1].min() < 0.05


def test_lorenz_tolerance_halving():
    s = get_system("lorenz")
    t = np.linspace(0, 1, 11)
    a = integrate(s, s.true_theta, s.x0, t)[-1]
    b = integrate(s, s.true_theta, s.x0, t, rtol=0.5e-8, atol=0.5e-9)[-1]
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-6


def test_lorenz_sensitive_dependence():
    s = get_system("lorenz")
    # the separation peaks near t = 0.3 and contracts again by t = 1, so the
    # check is on the largest separation over [0, 1]
    t = np.linspace(0, 1, 101)
    a = integrate(s, s.true_theta, s.x0, t)
    b = integrate(s, s.true_theta, s.x0 + 1e-6, t)
    growth = np.linalg.norm(a - b, axis=1) / np.linalg.norm(np.full(3, 1e-6))
    assert growth.max() >= 10


def test_pt_stays_in_range():
    s = get_system("pt")
    X = integrate(s, s.true_theta, s.x0, np.linspace(0, 50, 201))
    assert X.min() >= -1e-9 and X.max() <= 1.2


def test_quadrocopter_finite_from_rest():
    s = get_system("quadro")
    X = integrate(s, s.true_theta, s.x0, np.linspace(0, 15, 301))
    assert np.all(np.isfinite(X))


def test_pt_inadmissible_region_is_reported():
    s = get_system("pt")
    x0 = np.array([1.0, 0.0, 1.0, 0.0, -0.2])
    with pytest.raises(IntegrationError):
        integrate(s, s.true_theta, x0, np.linspace(0, 1, 5))


def test_nonfinite_inputs_rejected():
    with pytest.raises(IntegrationError):
        integrate(LV, [np.nan, 1, 1, 1], LV.x0, [0, 1])


def test_blow_up_reports_failure():
    with pytest.raises(IntegrationError):
        integrate(LV, [2, -5, 4, 1], LV.x0, np.linspace(0, 2, 10))


@pytest.mark.parametrize("name", ["lv", "pt", "lorenz", "quadro"])
def test_jacobians_match_finite_differences(name):
    s = get_system(name)
    rng = np.random.default_rng(1)
    X = s.x0 + 0.1 * rng.uniform(0.1, 1, (4, s.state_dim))
    th = s.true_theta
    Jx, Jt = s.jac(X, th)
    d = 1e-6
    for k in range(s.state_dim):
        E = np.zeros_like(X)
        E[:, k] = d
        fd = (s.f(X + E, th) - s.f(X - E, th)) / (2 * d)
        np.testing.assert_allclose(Jx[:, :, k], fd, rtol=1e-5, atol=1e-5)
    for p in range(s.param_dim):
        e = np.zeros_like(th)
        e[p] = d * max(1.0, abs(th[p]))
        fd = (s.f(X, th + e) - s.f(X, th - e)) / (2 * e[p])
        np.testing.assert_allclose(Jt[:, :, p], fd, rtol=1e-5, atol=1e-5)


def test_lv_analytic_jacobian_matches_complex_step():
    X = np.array([[5.0, 3.0], [1.0, 2.0]])
    a = LV.jac(X, LV.true_theta)
    b = complex_step_jacobians(LV.dynamics, X, LV.true_theta)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-14)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec()
    with pytest.raises(ValueError):
        NoiseSpec(variance=0.1, snr=5)
    with pytest.raises(ValueError):
        NoiseSpec(snr=0)


def test_snr_variance():
    s = get_system("lorenz")
    ds = generate_dataset(s, 2000, NoiseSpec(snr=10), seed=3)
    target = np.var(ds.states_true, axis=0) / 10
    np.testing.assert_allclose(ds.noise_variances, target)
    realised = np.var(ds.y - ds.states_true, axis=0)
    assert np.all(np.abs(realised / target - 1) < 0.15)


def test_noise_is_white():
    ds = generate_dataset(get_system("lorenz"), 2000, NoiseSpec(snr=5), seed=4)
    res = ds.y - ds.states_true
    for k in range(3):
        r = res[:, k] - res[:, k].mean()
        assert abs(r[1:] @ r[:-1] / (r @ r)) < 0.1
    c = np.corrcoef(res.T)
    assert np.max(np.abs(c - np.eye(3))) < 0.1


def test_zero_noise_and_determinism():
    a = generate_dataset(LV, 50, NoiseSpec(variance=0.0), seed=1)
    np.testing.assert_array_equal(a.y, a.states_true)
    b = generate_dataset(LV, 50, NoiseSpec(variance=0.1), seed=9)
    c = generate_dataset(LV, 50, NoiseSpec(variance=0.1), seed=9)
    np.testing.assert_array_equal(b.y, c.y)
    assert not np.array_equal(b.y, generate_dataset(LV, 50, NoiseSpec(variance=0.1), seed=10).y)
    np.testing.assert_allclose(b.times, np.linspace(0, 2, 50))
    with pytest.raises(ValueError):
        generate_dataset(LV, 1, NoiseSpec(variance=0.1), seed=0)


def _assert_same(a: Dataset, b: Dataset):
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.states_true, b.states_true)
    np.testing.assert_array_equal(a.y, b.y)


def test_text_round_trip_is_bit_exact(tmp_path):
    ds = generate_dataset(get_system("lorenz"), 40, NoiseSpec(snr=5), seed=2)
    text = dataset_to_text(ds)
    assert text.splitlines()[0] == "time,x_0,x_1,x_2,y_0,y_1,y_2"
    _assert_same(ds, dataset_from_text(text))
    _assert_same(ds, load_dataset(save_dataset(ds, tmp_path / "d.csv")))


def test_record_round_trip_is_bit_exact(tmp_path):
    ds = generate_dataset(LV, 40, NoiseSpec(variance=0.1), seed=2)
    back = dataset_from_records(json.loads(json.dumps(dataset_to_records(ds))))
    _assert_same(ds, back)
    assert back.noise_spec == ds.noise_spec and back.seed == 2
    _assert_same(ds, load_dataset(save_dataset(ds, tmp_path / "d.json")))


def test_bad_header_rejected():
    with pytest.raises(ValueError):
        dataset_from_text("t,a,b\n0,1,2\n")


def test_trmse_examples():
    ds = generate_dataset(LV, 100, NoiseSpec(variance=0.1), seed=0)
    assert trajectory_rmse(LV, LV.true_theta, ds) <= 1e-6
    v = trajectory_rmse(LV, [2.1, 1, 4, 1], ds)
    ref = integrate(LV, [2.1, 1, 4, 1], LV.x0, ds.times, rtol=1e-11, atol=1e-12)
    assert v == pytest.approx(np.linalg.norm(ref - ds.states_true) / 100, rel=1e-5)
    assert 0 < v < np.inf


def test_trmse_one_over_n_prefactor():
    # a constant pointwise error e over N points gives e * sqrt(N K) / N
    ds1 = generate_dataset(LV, 100, NoiseSpec(variance=0.0), seed=0)
    ds2 = generate_dataset(LV, 400, NoiseSpec(variance=0.0), seed=0)
    shifted = lambda ds: Dataset(ds.system, ds.times, ds.states_true + 0.01, ds.y, ds.noise_variances)
    a = trajectory_rmse(LV, LV.true_theta, shifted(ds1))
    b = trajectory_rmse(LV, LV.true_theta, shifted(ds2))
    assert a / b == pytest.approx(2.0, rel=1e-3)


def test_trmse_failure_is_metric_error():
    ds = generate_dataset(LV, 20, NoiseSpec(variance=0.1), seed=0)
    with pytest.raises(MetricError):
        trajectory_rmse(LV, [2, -5, 4, 1], ds)
