"""Run the experiment configs in scripts/configs through the CLI.

    python scripts/run_experiments.py                 # every experiment
    python scripts/run_experiments.py kernel lv-odin  # a subset
    python scripts/run_experiments.py --list

Results land in results/<experiment>/ as TSV tables plus a JSON manifest.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from sleipnir.cli import main as cli_main

CONFIGS = Path(__file__).resolve().parent / "configs"

# name -> (command, config file, extra global flags)
EXPERIMENTS = {
    "kernel": ("kernel-sweep", "kernel_sweep.toml", []),
    "lorenz-posterior": ("posterior-sweep", "lorenz_posterior.toml", []),
    "lv-odin": ("odin-run", "lv_odin.toml", []),
    "lorenz-odin": ("odin-run", "lorenz_odin.toml", []),
    "quadro-odin": ("odin-run", "quadro_odin.toml", []),
    "bench-n": ("bench", "bench_observations.toml", []),
    "bench-m": ("bench", "bench_features.toml", []),
}


def run(name, out_root, workers):
    command, config, extra = EXPERIMENTS[name]
    argv = ["--config", str(CONFIGS / config), "--out", str(Path(out_root) / name),
            "--workers", str(workers), *extra, command]
    t0 = time.perf_counter()
    code = cli_main(argv)
    print(f"{name}: exit {code} in {time.perf_counter() - t0:.1f}s", flush=True)
    return code


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", help="experiments to run (default: all)")
    ap.add_argument("--out", default="results")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--list", action="store_true")
    args = ap.parse_args(argv)
    if args.list:
        for name, (command, config, _) in EXPERIMENTS.items():
            print(f"{name:18s} {command:16s} {config}")
        return 0
    unknown = [n for n in args.names if n not in EXPERIMENTS]
    if unknown:
        ap.error(f"unknown experiment(s): {', '.join(unknown)}")
    codes = [run(n, args.out, args.workers) for n in (args.names or EXPERIMENTS)]
    return max(codes, default=0)


if __name__ == "__main__":
    sys.exit(main())
