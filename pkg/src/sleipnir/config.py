"""TOML experiment configuration, validated into dataclasses.

Every validation failure raises ``ConfigError`` with a dotted location such as
``features.dims[1]`` so a bad file can be fixed without guessing.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .systems import SYSTEMS, NoiseSpec

FEATURE_KINDS = ("qff", "rff", "rffb", "exact")


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


def _expect(where, value, kind, what):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(where, f"expected {what}, got {value!r}")
    if not isinstance(value, kind):
        raise ConfigError(where, f"expected {what}, got {value!r}")
    return value


def _num_list(where, value, kind, what, positive=False):
    _expect(where, value, list, f"a list of {what}")
    out = []
    for i, v in enumerate(value):
        v = _expect(f"{where}[{i}]", v, kind, what)
        if positive and not v > 0:
            raise ConfigError(f"{where}[{i}]", f"must be positive, got {v!r}")
        out.append(v)
    return out


@dataclass
class NoiseConfig:
    variance: float | None = None
    snr: float | None = None

    def spec(self) -> NoiseSpec:
        return NoiseSpec(self.variance, self.snr)


@dataclass
class FeatureConfig:
    """``dims`` are feature dimensions; a QFF dimension of 2m means order m."""

    kinds: list = field(default_factory=lambda: ["qff"])
    dims: list = field(default_factory=lambda: [80])


@dataclass
class HyperConfig:
    mode: str = "fit"
    values: list | None = None       # one [rho, lengthscale, sigma2] per state dimension
    fit_order: int | None = None     # QFF order for the fit; exact likelihood if absent


@dataclass
class OdinConfig:
    learn_gamma: bool = False
    gamma: float | None = None
    max_iter: int = 5000
    timing_repeats: int = 15
    exact_reference: bool = False


@dataclass
class KernelSweepConfig:
    lengthscales: list = field(default_factory=lambda: [0.05, 0.1, 0.5])
    orders: list = field(default_factory=lambda: [8, 16, 24, 32, 48, 64, 96, 128])
    grid: int = 1001
    samples: int = 100
    kinds: list = field(default_factory=lambda: ["qff", "rff", "rffb"])
    rho: float = 1.7724538509055159


@dataclass
class PosteriorSweepConfig:
    dim: int = 0
    gamma: float = 1e-2
    orders: list = field(default_factory=lambda: [16, 32, 48, 64, 96])
    kinds: list = field(default_factory=lambda: ["qff", "rff"])
    taus: list = field(default_factory=lambda: [0.8])


@dataclass
class BenchConfig:
    mode: str = "observations"
    ladder: list = field(default_factory=lambda: [1000, 2000, 4000, 8000])
    fixed: int = 40
    repeats: int = 15


@dataclass
class ExperimentConfig:
    system: str = "lv"
    n: int = 100
    seeds: list = field(default_factory=lambda: [0])
    data_format: str = "csv"
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(variance=0.1))
    features: FeatureConfig = field(default_factory=FeatureConfig)
    hyper: HyperConfig = field(default_factory=HyperConfig)
    odin: OdinConfig = field(default_factory=OdinConfig)
    kernel_sweep: KernelSweepConfig = field(default_factory=KernelSweepConfig)
    posterior_sweep: PosteriorSweepConfig = field(default_factory=PosteriorSweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self):
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_SECTIONS = {
    "noise": NoiseConfig, "features": FeatureConfig, "hyper": HyperConfig, "odin": OdinConfig,
    "kernel_sweep": KernelSweepConfig, "posterior_sweep": PosteriorSweepConfig, "bench": BenchConfig,
}

# field -> (python type, description, list element type or None, positive)
_SCALARS = {
    "system": (str, "a system name", None, False),
    "n": (int, "an integer", None, True),
    "seeds": (list, "integers", int, False),
    "data_format": (str, "'csv' or 'json'", None, False),
    "noise.variance": (float, "a number", None, False),
    "noise.snr": (float, "a number", None, True),
    "features.kinds": (list, "strings", str, False),
    "features.dims": (list, "integers", int, True),
    "hyper.mode": (str, "'fit' or 'fixed'", None, False),
    "hyper.values": (list, "[rho, lengthscale, sigma2] triples", list, False),
    "hyper.fit_order": (int, "an integer", None, True),
    "odin.learn_gamma": (bool, "true or false", None, False),
    "odin.gamma": (float, "a number", None, True),
    "odin.max_iter": (int, "an integer", None, True),
    "odin.timing_repeats": (int, "an integer", None, False),
    "odin.exact_reference": (bool, "true or false", None, False),
    "kernel_sweep.lengthscales": (list, "numbers", float, True),
    "kernel_sweep.orders": (list, "integers", int, True),
    "kernel_sweep.grid": (int, "an integer", None, False),
    "kernel_sweep.samples": (int, "an integer", None, True),
    "kernel_sweep.kinds": (list, "strings", str, False),
    "kernel_sweep.rho": (float, "a number", None, True),
    "posterior_sweep.dim": (int, "an integer", None, False),
    "posterior_sweep.gamma": (float, "a number", None, True),
    "posterior_sweep.orders": (list, "integers", int, True),
    "posterior_sweep.kinds": (list, "strings", str, False),
    "posterior_sweep.taus": (list, "numbers", float, False),
    "bench.mode": (str, "'observations' or 'features'", None, False),
    "bench.ladder": (list, "integers", int, True),
    "bench.fixed": (int, "an integer", None, True),
    "bench.repeats": (int, "an integer", None, True),
}


def _coerce(where, value):
    kind, what, elem, positive = _SCALARS[where]
    if kind is list:
        if elem is list:
            _expect(where, value, list, what)
            return [_num_list(f"{where}[{i}]", v, float, "numbers", positive=True) for i, v in enumerate(value)]
        if elem is str:
            _expect(where, value, list, f"a list of {what}")
            return [_expect(f"{where}[{i}]", v, str, "a string") for i, v in enumerate(value)]
        return _num_list(where, value, elem, what, positive)
    value = _expect(where, value, kind, what)
    if positive and not value > 0:
        raise ConfigError(where, f"must be positive, got {value!r}")
    return value


def _build_section(name, cls, raw):
    _expect(name, raw, dict, "a table")
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{name}.{key}"
        if key not in known:
            raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(known))})")
        kwargs[key] = _coerce(where, value)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    top = {f.name for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in top:
            raise ConfigError(key, f"unknown key (allowed: {', '.join(sorted(top))})")
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        else:
            kwargs[key] = _coerce(key, value)
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    if cfg.system.lower() not in SYSTEMS:
        raise ConfigError("system", f"unknown system {cfg.system!r} (choose from {', '.join(sorted(SYSTEMS))})")
    if cfg.n < 2:
        raise ConfigError("n", "need at least 2 observations")
    if not cfg.seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if cfg.data_format not in ("csv", "json"):
        raise ConfigError("data_format", f"must be 'csv' or 'json', got {cfg.data_format!r}")
    if (cfg.noise.variance is None) == (cfg.noise.snr is None):
        raise ConfigError("noise", "give exactly one of variance or snr")
    if cfg.noise.variance is not None and cfg.noise.variance < 0:
        raise ConfigError("noise.variance", "must be >= 0")
    for i, kind in enumerate(cfg.features.kinds):
        if kind not in FEATURE_KINDS:
            raise ConfigError(f"features.kinds[{i}]", f"unknown kind {kind!r} (choose from {', '.join(FEATURE_KINDS)})")
    if not cfg.features.dims:
        raise ConfigError("features.dims", "at least one feature dimension is required")
    if {"qff", "rff"} & set(cfg.features.kinds):
        for i, d in enumerate(cfg.features.dims):
            if d % 2:
                raise ConfigError(f"features.dims[{i}]", f"qff/rff need an even feature dimension (cos/sin pairs), got {d}")
    if cfg.hyper.mode not in ("fit", "fixed"):
        raise ConfigError("hyper.mode", f"must be 'fit' or 'fixed', got {cfg.hyper.mode!r}")
    K = SYSTEMS[cfg.system.lower()].state_dim
    if cfg.hyper.mode == "fixed":
        if cfg.hyper.values is None:
            raise ConfigError("hyper.values", "required when hyper.mode = 'fixed'")
        if len(cfg.hyper.values) != K:
            raise ConfigError("hyper.values", f"need one triple per state dimension ({K}), got {len(cfg.hyper.values)}")
        for i, v in enumerate(cfg.hyper.values):
            if len(v) != 3:
                raise ConfigError(f"hyper.values[{i}]", "expected [rho, lengthscale, sigma2]")
    ks = cfg.kernel_sweep
    if ks.grid < 2:
        raise ConfigError("kernel_sweep.grid", "grid size must be >= 2")
    for i, kind in enumerate(ks.kinds):
        if kind not in ("qff", "rff", "rffb"):
            raise ConfigError(f"kernel_sweep.kinds[{i}]", f"unknown kind {kind!r}")
    for i, m in enumerate(ks.orders):
        if m < 4:
            raise ConfigError(f"kernel_sweep.orders[{i}]", "bounds need m >= 4")
    ps = cfg.posterior_sweep
    if not 0 <= ps.dim < K:
        raise ConfigError("posterior_sweep.dim", f"must be in [0, {K})")
    for i, kind in enumerate(ps.kinds):
        if kind not in FEATURE_KINDS:
            raise ConfigError(f"posterior_sweep.kinds[{i}]", f"unknown kind {kind!r}")
    if cfg.bench.mode not in ("observations", "features"):
        raise ConfigError("bench.mode", f"must be 'observations' or 'features', got {cfg.bench.mode!r}")
    if len(cfg.bench.ladder) < 3:
        raise ConfigError("bench.ladder", "a scaling ladder needs at least 3 points")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"{path}: {exc}") from exc
    return config_from_dict(raw)
