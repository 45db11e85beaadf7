"""Command-line experiment runner.

    sleipnir [--config FILE] [--out DIR] [--seed-offset K] [--workers W] [--exact] COMMAND

Commands: gen-data, kernel-sweep, posterior-sweep, odin-run, bench, bounds.
Tables are tab-separated with a header row and a ``config_hash`` column; each
command also writes ``<command>_manifest.json`` next to its tables.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import BoundDomainError, min_order_gprd, min_order_risk, theorem2_budget
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (
    EXACT_CEILING,
    OdinRunSpec,
    bench_scaling,
    derivative_observations,
    fit_dataset_hyper,
    kernel_error_sweep,
    posterior_error_sweep,
    quantile_summary,
    run_odin,
)
from .odin import DimHyperparams, FitError
from .systems import IntegrationError, generate_dataset, get_system, save_dataset

log = logging.getLogger("sleipnir")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def write_table(path: Path, rows, config_hash: str, columns=None):
    """Tab-separated table; missing cells are empty."""
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w") as fh:
        fh.write("\t".join(columns + ["config_hash"]) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(r.get(c)) for c in columns) + f"\t{config_hash}\n")
    return path


def read_table(path):
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, ln.split("\t"))) for ln in lines[1:]]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, args, extra: dict):
    doc = {"command": command, "version": __version__, "config_hash": cfg.config_hash(),
           "seed_offset": args.seed_offset, "config": cfg.to_dict(), **extra}
    path = out / f"{command.replace('-', '_')}_manifest.json"
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True))
    return path


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _seeds(cfg, args):
    return [s + args.seed_offset for s in cfg.seeds]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args, out: Path):
    system = get_system(cfg.system)
    spec = cfg.noise.spec()
    files, per_seed = [], {}
    for seed in _seeds(cfg, args):
        ds = generate_dataset(system, cfg.n, spec, seed)
        path = save_dataset(ds, out / f"{system.name}_n{cfg.n}_seed{seed}.{cfg.data_format}")
        files.append(path.name)
        per_seed[str(seed)] = {"file": path.name, "noise_variances": ds.noise_variances}
    write_manifest(out, "gen-data", cfg, args, {
        "system": system.name, "true_theta": system.true_theta, "x0": system.x0,
        "t_end": system.t_end, "noise_spec": spec.to_dict(), "datasets": per_seed})
    print(f"wrote {len(files)} datasets to {out}")


def cmd_kernel_sweep(cfg, args, out):
    ks = cfg.kernel_sweep
    rows = kernel_error_sweep(ks.lengthscales, ks.orders, ks.kinds, ks.grid, ks.samples, ks.rho,
                              seed=args.seed_offset)
    write_table(out / "kernel_sweep.tsv", rows, cfg.config_hash())
    qff = [r for r in rows if r["kind"] == "qff"]
    write_manifest(out, "kernel-sweep", cfg, args, {
        "qff_rows": len(qff), "bound_violations": sum(not r["bound_ok"] for r in qff),
        "strict_violations_at_float_floor": sum(not r["strict_ok"] for r in qff)})
    print(f"kernel-sweep: {len(rows)} rows")


def _hyper_for(cfg, ds):
    if cfg.hyper.mode == "fixed":
        return tuple(DimHyperparams(*v) for v in cfg.hyper.values)
    return fit_dataset_hyper(ds, cfg.hyper.fit_order)


def _posterior_task(task):
    cfg, seed = task
    system = get_system(cfg.system)
    ps = cfg.posterior_sweep
    ds = generate_dataset(system, cfg.n, cfg.noise.spec(), seed)
    hyper = _hyper_for(cfg, ds)[ps.dim]
    obs = derivative_observations(ds, ps.dim, system, ps.gamma, hyper.sigma2)
    rows = posterior_error_sweep(obs, hyper.kernel, ps.kinds, ps.orders, ps.taus, seeds=(seed,))
    for r in rows:
        r["seed"] = seed
    return rows, (hyper.rho, hyper.lengthscale, hyper.sigma2)


def cmd_posterior_sweep(cfg, args, out):
    if cfg.n > EXACT_CEILING:
        raise ConfigError("n", f"the exact posterior reference is limited to N <= {EXACT_CEILING}")
    results = _map(_posterior_task, [(cfg, s) for s in _seeds(cfg, args)], args.workers)
    rows = sorted((r for rs, _ in results for r in rs), key=lambda r: (r["kind"], r["m"], r["tau"], r["seed"]))
    write_table(out / "posterior_sweep_runs.tsv", rows, cfg.config_hash(),
                ["seed", "kind", "m", "tau", "e_mu", "e_sigma", "e_mu1", "e_sigma1"])
    summary = []
    keys = sorted({(r["kind"], r["m"], r["tau"]) for r in rows})
    for kind, m, tau in keys:
        grp = [r for r in rows if (r["kind"], r["m"], r["tau"]) == (kind, m, tau)]
        row = {"kind": kind, "m": m, "tau": tau}
        for c in ("e_mu", "e_sigma", "e_mu1", "e_sigma1"):
            q = quantile_summary([g[c] for g in grp])
            row.update({c: q["median"], f"{c}_q20": q["q_lo"], f"{c}_q80": q["q_hi"]})
        summary.append(row)
    write_table(out / "posterior_sweep.tsv", summary, cfg.config_hash())
    write_manifest(out, "posterior-sweep", cfg, args, {"hyper": {str(s): h for s, (_, h) in
                                                                  zip(_seeds(cfg, args), results)}})
    print(f"posterior-sweep: {len(summary)} summary rows")


def _odin_task(task):
    cfg, seed, exact_only = task
    system = get_system(cfg.system)
    ds = generate_dataset(system, cfg.n, cfg.noise.spec(), seed)
    try:
        hyper = _hyper_for(cfg, ds)
    except FitError as exc:
        return [{"seed": seed, "kind": "-", "count": 0, "status": f"hyperparameter fit failed: {exc}"}]
    o = cfg.odin
    runs = []
    if not exact_only:
        for kind in cfg.features.kinds:
            if kind == "exact":
                continue
            for dim in cfg.features.dims:
                runs.append((kind, dim // 2 if kind == "qff" else dim))
    if exact_only or o.exact_reference or "exact" in cfg.features.kinds:
        runs.append(("exact", 0))
    rows = []
    for kind, count in runs:
        spec = OdinRunSpec(kind=kind, count=count, seed=seed, hyper=hyper, learn_gamma=o.learn_gamma,
                           gamma=o.gamma, max_iter=o.max_iter, timing_repeats=o.timing_repeats)
        try:
            res = run_odin(system, ds, spec)
        except (np.linalg.LinAlgError, IntegrationError, FloatingPointError) as exc:
            res = {"kind": kind, "count": count, "seed": seed, "status": f"failure: {exc}", "trmse": math.nan}
        res["feature_dim"] = 2 * count if kind == "qff" else count
        rows.append(res)
    return rows


def cmd_odin_run(cfg, args, out):
    exact_only = args.exact
    if (exact_only or cfg.odin.exact_reference or "exact" in cfg.features.kinds) and cfg.n > EXACT_CEILING:
        raise ConfigError("n", f"exact ODIN runs are limited to N <= {EXACT_CEILING}")
    results = _map(_odin_task, [(cfg, s, exact_only) for s in _seeds(cfg, args)], args.workers)
    runs = sorted((r for rs in results for r in rs), key=lambda r: (r["kind"], r.get("count", 0), r["seed"]))
    system = get_system(cfg.system)
    table = []
    for r in runs:
        row = {"seed": r["seed"], "kind": r["kind"], "feature_dim": r.get("feature_dim"),
               "trmse": r.get("trmse"), "n_iter": r.get("n_iter"), "converged": r.get("converged"),
               "iter_time_median_s": r.get("iter_time_median"), "iter_time_std_s": r.get("iter_time_std"),
               "status": r.get("status")}
        for j, v in enumerate(r.get("theta", [math.nan] * system.param_dim)):
            row[f"theta_{j}"] = v
        table.append(row)
    cols = ["seed", "kind", "feature_dim"] + [f"theta_{j}" for j in range(system.param_dim)] + \
           ["trmse", "n_iter", "converged", "iter_time_median_s", "iter_time_std_s", "status"]
    write_table(out / "odin_runs.tsv", table, cfg.config_hash(), cols)
    summary = []
    for key in sorted({(r["kind"], r["feature_dim"] or 0) for r in table}):
        grp = [r for r in table if (r["kind"], r["feature_dim"] or 0) == key]
        q = quantile_summary([g["trmse"] if g["trmse"] is not None else math.nan for g in grp])
        it = [g["iter_time_median_s"] for g in grp if g["iter_time_median_s"] is not None]
        summary.append({"kind": key[0], "feature_dim": key[1], "trmse_median": q["median"],
                        "trmse_q20": q["q_lo"], "trmse_q80": q["q_hi"], "n_ok": q["n_ok"], "n_runs": len(grp),
                        "iter_time_median_s": float(np.median(it)) if it else None})
    write_table(out / "odin_summary.tsv", summary, cfg.config_hash())
    trace_rows = [{"seed": r["seed"], "kind": r["kind"], "feature_dim": r.get("feature_dim"), "iter": i, "risk": v}
                  for r in runs for i, v in enumerate(r.get("risk_trace", []))]
    write_table(out / "odin_risk_trace.tsv", trace_rows, cfg.config_hash(),
                ["seed", "kind", "feature_dim", "iter", "risk"])
    write_manifest(out, "odin-run", cfg, args, {
        "true_theta": system.true_theta,
        "hyper": {f"{r['seed']}": r.get("hyper") for r in runs if "hyper" in r}})
    failures = [r for r in table if r["status"] != "ok"]
    for r in failures:
        log.warning("seed %s %s/%s: %s", r["seed"], r["kind"], r["feature_dim"], r["status"])
    print(f"odin-run: {len(table)} runs, {len(failures)} failures")
    if table and len(failures) == len(table):
        raise NumericFailure("every ODIN run failed")


def cmd_bench(cfg, args, out):
    b = cfg.bench
    rows, slope = bench_scaling(b.mode, b.ladder, b.fixed, b.repeats, exact=args.exact)
    write_table(out / f"bench_{b.mode}.tsv", rows, cfg.config_hash())
    write_manifest(out, "bench", cfg, args, {"mode": b.mode, "loglog_slope": slope,
                                             "timing": "one risk + gradient evaluation incl. factorisations"})
    print(f"bench {b.mode}: slope {slope:.3f}")


def cmd_bounds(cfg, args, out):
    """Print ``key<TAB>value`` lines; values use repr so they parse back exactly."""
    what = args.what
    lines = []
    if what == "budget":
        b = theorem2_budget(args.m, args.l, args.rho if args.rho is not None else math.sqrt(math.pi))
        lines = [("m", b.m), ("lengthscale", b.lengthscale), ("rho", b.rho), ("k_bound", b.k_bound),
                 ("d1_bound", b.d1_bound), ("d2_bound", b.d2_bound), ("d1_bound_tight", b.d1_bound_tight)]
    elif what == "gprd":
        rho = 1.0 if args.rho is None else args.rho
        lines = [("m", min_order_gprd(args.l, rho, args.n, args.c, args.R, args.C))]
    elif what == "risk":
        rho = 1.0 if args.rho is None else args.rho
        lines = [("m", min_order_risk(args.l, rho, args.lam, args.gamma, args.n, args.eps))]
    text = "".join(f"{k}\t{v!r}\n" for k, v in lines)
    sys.stdout.write(text)
    if args.out:
        (out / f"bounds_{what}.tsv").write_text("key\tvalue\n" + text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "kernel-sweep": cmd_kernel_sweep,
    "posterior-sweep": cmd_posterior_sweep,
    "odin-run": cmd_odin_run,
    "bench": cmd_bench,
    "bounds": cmd_bounds,
}


def build_parser():
    p = argparse.ArgumentParser(prog="sleipnir", description="QFF / SLEIPNIR experiment runner")
    p.add_argument("--config", type=Path, help="TOML experiment config")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: ./results)")
    p.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes for per-seed tasks")
    p.add_argument("--exact", action="store_true", help="force the exact reference path")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        if name != "bounds":
            sub.add_parser(name)
    b = sub.add_parser("bounds", help="error budgets and minimum QFF orders")
    b.add_argument("what", choices=["budget", "gprd", "risk"])
    b.add_argument("--m", type=int)
    b.add_argument("--l", type=float, required=True)
    b.add_argument("--rho", type=float)
    b.add_argument("--n", type=int)
    b.add_argument("--c", type=float, help="min(gamma, sigma2) for the posterior bound")
    b.add_argument("--R", type=float, help="max(|y|, |F|) for the posterior bound")
    b.add_argument("--C", type=float, help="posterior error tolerance")
    b.add_argument("--lam", type=float)
    b.add_argument("--gamma", type=float)
    b.add_argument("--eps", type=float)
    return p


_REQUIRED = {"budget": ("m",), "gprd": ("n", "c", "R", "C"), "risk": ("n", "lam", "gamma", "eps")}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        if args.command == "bounds":
            missing = [k for k in _REQUIRED[args.what] if getattr(args, k) is None]
            if missing:
                raise ConfigError("bounds", f"{args.what} needs --{', --'.join(missing)}")
            cfg = ExperimentConfig()
        else:
            cfg = load_config(args.config) if args.config else ExperimentConfig()
        out = args.out or Path("results")
        if args.command != "bounds" or args.out:
            out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
    except (ConfigError, BoundDomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, np.linalg.LinAlgError, IntegrationError, FloatingPointError, FitError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
