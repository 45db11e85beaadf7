import json

import numpy as np
import pytest

from sleipnir.cli import main, read_table
from sleipnir.config import ConfigError, ExperimentConfig, config_from_dict
from sleipnir.systems import get_system, load_dataset

SMALL = """
system = "lv"
n = 60
seeds = [0, 1]
[noise]
variance = 0.1
[hyper]
mode = "fixed"
values = [[4.0, 0.2, 0.1], [3.0, 0.2, 0.1]]
[features]
kinds = ["qff"]
dims = [40]
[odin]
exact_reference = true
timing_repeats = 2
max_iter = 300
[kernel_sweep]
lengthscales = [0.1]
orders = [16, 64]
kinds = ["qff", "rff"]
samples = 8
[posterior_sweep]
orders = [16, 48]
kinds = ["exact", "qff"]
taus = [0.2, 0.8]
[bench]
ladder = [200, 400, 800]
fixed = 16
repeats = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(SMALL)
    return p


def run(cfg_file, out, *cmd):
    return main(["--config", str(cfg_file), "--out", str(out), *cmd])


def test_gen_data_writes_files_and_manifest(cfg_file, tmp_path):
    out = tmp_path / "d"
    assert run(cfg_file, out, "gen-data") == 0
    man = json.loads((out / "gen_data_manifest.json").read_text())
    assert man["true_theta"] == [2.0, 1.0, 4.0, 1.0]
    assert sorted(man["datasets"]) == ["0", "1"]
    ds = load_dataset(out / man["datasets"]["0"]["file"])
    assert ds.y.shape == (60, 2)


def test_gen_data_snr_recorded(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('system = "lorenz"\nn = 200\nseeds = [3]\ndata_format = "json"\n[noise]\nsnr = 5\n')
    assert main(["--config", str(p), "--out", str(tmp_path), "gen-data"]) == 0
    man = json.loads((tmp_path / "gen_data_manifest.json").read_text())
    var = man["datasets"]["3"]["noise_variances"]
    ds = load_dataset(tmp_path / man["datasets"]["3"]["file"])
    np.testing.assert_allclose(var, np.var(ds.states_true, axis=0) / 5)


def test_seed_offset_shifts_seeds(cfg_file, tmp_path):
    assert main(["--config", str(cfg_file), "--out", str(tmp_path), "--seed-offset", "10", "gen-data"]) == 0
    man = json.loads((tmp_path / "gen_data_manifest.json").read_text())
    assert sorted(man["datasets"]) == ["10", "11"]


def test_kernel_sweep_table(cfg_file, tmp_path):
    assert run(cfg_file, tmp_path, "kernel-sweep") == 0
    rows = read_table(tmp_path / "kernel_sweep.tsv")
    assert {r["kind"] for r in rows} == {"qff", "rff"}
    assert len({r["config_hash"] for r in rows}) == 1
    for r in rows:
        if r["kind"] == "qff":
            assert r["bound_ok"] == "true"


def test_posterior_sweep_exact_rows_are_zero(cfg_file, tmp_path):
    assert run(cfg_file, tmp_path, "posterior-sweep") == 0
    rows = read_table(tmp_path / "posterior_sweep.tsv")
    for r in rows:
        if r["kind"] == "exact":
            assert all(float(r[c]) == 0.0 for c in ("e_mu", "e_sigma", "e_mu1", "e_sigma1"))
    qff = {int(r["m"]): float(r["e_mu"]) for r in rows if r["kind"] == "qff" and r["tau"] == "0.8"}
    assert qff[48] <= qff[16]


def _strip_timing(path):
    rows = read_table(path)
    for r in rows:
        for k in list(r):
            if "time" in k:
                r.pop(k)
    return rows


def test_odin_run_deterministic_and_workers_agree(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(cfg_file, a, "odin-run") == 0
    assert main(["--config", str(cfg_file), "--out", str(b), "--workers", "2", "odin-run"]) == 0
    assert _strip_timing(a / "odin_runs.tsv") == _strip_timing(b / "odin_runs.tsv")
    runs = read_table(a / "odin_runs.tsv")
    assert {r["kind"] for r in runs} == {"exact", "qff"}
    assert all(r["status"] == "ok" for r in runs)
    summary = read_table(a / "odin_summary.tsv")
    assert {"trmse_median", "trmse_q20", "trmse_q80", "iter_time_median_s"} <= set(summary[0])
    trace = read_table(a / "odin_risk_trace.tsv")
    assert len(trace) > 10


def test_exact_flag_runs_only_reference(cfg_file, tmp_path):
    assert main(["--config", str(cfg_file), "--out", str(tmp_path), "--exact", "odin-run"]) == 0
    assert {r["kind"] for r in read_table(tmp_path / "odin_runs.tsv")} == {"exact"}


def test_learn_gamma_adds_only_logdet(tmp_path):
    from sleipnir.experiments import OdinRunSpec, build_problem
    from sleipnir.odin import sleipnir_risk, qff_maps_for
    from sleipnir.systems import NoiseSpec, generate_dataset
    lv = get_system("lv")
    ds = generate_dataset(lv, 60, NoiseSpec(variance=0.1), 0)
    hyper = ((4.0, 0.2, 0.1), (3.0, 0.2, 0.1))
    p0 = build_problem(lv, ds, OdinRunSpec(hyper=hyper))
    p1 = build_problem(lv, ds, OdinRunSpec(hyper=hyper, learn_gamma=True))
    a = sleipnir_risk(p0, qff_maps_for(p0, 20), ds.y, np.ones(4))
    b = sleipnir_risk(p1, qff_maps_for(p1, 20), ds.y, np.ones(4))
    assert (a.prior_term, a.obs_term, a.deriv_term) == (b.prior_term, b.obs_term, b.deriv_term)
    assert a.logdet_term == 0.0 and b.logdet_term != 0.0


def test_bench_reports_slope(cfg_file, tmp_path):
    assert run(cfg_file, tmp_path, "bench") == 0
    man = json.loads((tmp_path / "bench_manifest.json").read_text())
    assert np.isfinite(man["loglog_slope"])
    assert len(read_table(tmp_path / "bench_observations.tsv")) == 3


def test_bounds_round_trip(capsys):
    assert main(["bounds", "budget", "--m", "10", "--l", "1.0"]) == 0
    vals = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    from sleipnir.bounds import theorem2_budget
    b = theorem2_budget(10, 1.0)
    assert float(vals["k_bound"]) == b.k_bound and float(vals["d2_bound"]) == b.d2_bound
    assert main(["bounds", "risk", "--l", "0.2", "--lam", "1e-6", "--gamma", "0.1", "--n", "100",
                 "--eps", "0.1"]) == 0
    assert capsys.readouterr().out == "m\t86\n"
    assert main(["bounds", "gprd", "--l", "0.1", "--n", "100", "--c", "0.01", "--R", "10", "--C", "1e-3"]) == 0
    assert capsys.readouterr().out == "m\t139\n"


def test_bounds_errors_exit_2(capsys):
    assert main(["bounds", "risk", "--l", "0.2", "--lam", "1e-6", "--gamma", "0.1", "--n", "10", "--eps", "0.1"]) == 2
    assert main(["bounds", "risk", "--l", "0.2"]) == 2
    assert main(["nonsense"]) == 2


@pytest.mark.parametrize("raw,where", [
    ({"seeds": []}, "seeds"),
    ({"system": "pendulum"}, "system"),
    ({"features": {"kinds": ["qff"], "dims": [40, 41]}}, "features.dims[1]"),
    ({"features": {"kinds": ["foo"]}}, "features.kinds[0]"),
    ({"noise": {"variance": 0.1, "snr": 3}}, "noise"),
    ({"odin": {"max_iterations": 3}}, "odin.max_iterations"),
    ({"n": "many"}, "n"),
    ({"hyper": {"mode": "fixed"}}, "hyper.values"),
    ({"bench": {"ladder": [100]}}, "bench.ladder"),
    ({"kernel_sweep": {"grid": 1}}, "kernel_sweep.grid"),
    ({"kernel_sweep": {"lengthscales": [0.1, -1]}}, "kernel_sweep.lengthscales[1]"),
])
def test_config_errors_name_location(raw, where):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.where == where


def test_config_defaults_and_hash():
    a = config_from_dict({})
    assert isinstance(a, ExperimentConfig)
    assert a.config_hash() == config_from_dict({}).config_hash()
    assert a.config_hash() != config_from_dict({"n": 101}).config_hash()


def test_config_error_exit_code(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("seeds = []\n")
    assert main(["--config", str(p), "--out", str(tmp_path), "gen-data"]) == 2
    p.write_text("this is = = not toml")
    assert main(["--config", str(p), "--out", str(tmp_path), "gen-data"]) == 2
    assert main(["--config", str(tmp_path / "missing.toml"), "gen-data"]) == 2


def test_exact_ceiling(tmp_path):
    p = tmp_path / "big.toml"
    p.write_text("n = 2500\n[odin]\nexact_reference = true\n")
    assert main(["--config", str(p), "--out", str(tmp_path), "odin-run"]) == 2
    assert main(["--config", str(p), "--out", str(tmp_path), "posterior-sweep"]) == 2


def test_numeric_failure_exit_3(cfg_file, tmp_path, monkeypatch):
    import sleipnir.cli as cli

    def broken(*a, **k):
        raise np.linalg.LinAlgError("factorisation failed")

    monkeypatch.setattr(cli, "run_odin", broken)
    assert run(cfg_file, tmp_path, "odin-run") == 3
    runs = read_table(tmp_path / "odin_runs.tsv")
    assert all(r["status"].startswith("failure") for r in runs)
