"""Fourier feature maps for the RBF kernel and its first two derivatives.

All maps use the frequency scaling ``cos(w * sqrt(2)/l * t)`` under which the
RBF kernel is the expectation of the cosine against the density
``exp(-w^2)/sqrt(pi)``.  QFF takes Gauss-Hermite nodes for ``w``; RFF and
RFF-B sample them.

Feature matrices are ``(D, N)``: one column per time point.  With this layout

    Phi.T  @ Phi   ~ C      Phi.T  @ PhiP ~ C'  (second-argument derivative)
    PhiP.T @ Phi   ~ 'C     PhiP.T @ PhiP ~ C''
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .kernels import RbfHyperparams
from .quadrature import QuadratureRule, gauss_hermite_rule

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class FeatureMatrices:
    Phi: np.ndarray
    PhiPrime: np.ndarray

    @property
    def n_points(self):
        return self.Phi.shape[1]


class _FourierMap:
    """Shared evaluation for maps of the form sum_i a_i [cos, sin](f_i t)."""

    hyperparams: RbfHyperparams

    @property
    def feature_dim(self) -> int:
        raise NotImplementedError

    def phi(self, t):
        return self.matrices(t).Phi

    def phi_prime(self, t):
        return self.matrices(t).PhiPrime

    def matrices(self, times) -> FeatureMatrices:
        raise NotImplementedError


def _paired_features(amp, freq, times):
    t = np.atleast_1d(np.asarray(times, dtype=float))
    arg = np.outer(freq, t)
    c = np.cos(arg)
    s = np.sin(arg)
    m = freq.size
    Phi = np.empty((2 * m, t.size))
    PhiP = np.empty((2 * m, t.size))
    a = amp[:, None]
    af = (amp * freq)[:, None]
    Phi[0::2] = a * c
    Phi[1::2] = a * s
    PhiP[0::2] = -af * s
    PhiP[1::2] = af * c
    return FeatureMatrices(Phi, PhiP)


@dataclass(frozen=True, eq=False)
class QffFeatureMap(_FourierMap):
    hyperparams: RbfHyperparams
    rule: QuadratureRule
    amplitudes: np.ndarray = field(init=False, repr=False)
    frequencies: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h = self.hyperparams
        amp = np.sqrt(h.rho * self.rule.weights / np.sqrt(np.pi))
        freq = self.rule.nodes * SQRT2 / h.lengthscale
        object.__setattr__(self, "amplitudes", amp)
        object.__setattr__(self, "frequencies", freq)

    @property
    def order(self):
        return self.rule.order

    @property
    def feature_dim(self):
        return 2 * self.rule.order

    def matrices(self, times):
        return _paired_features(self.amplitudes, self.frequencies, times)


def qff_map(h: RbfHyperparams, m: int) -> QffFeatureMap:
    return QffFeatureMap(h, gauss_hermite_rule(m))


def qff_phi(fmap: QffFeatureMap, t: float) -> np.ndarray:
    return fmap.matrices([t]).Phi[:, 0]


def qff_phi_prime(fmap: QffFeatureMap, t: float) -> np.ndarray:
    return fmap.matrices([t]).PhiPrime[:, 0]


def qff_matrices(fmap, times) -> FeatureMatrices:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.size < 1:
        raise ValueError("need at least one time point")
    return fmap.matrices(t)


@dataclass(frozen=True, eq=False)
class RandomFeatureMap(_FourierMap):
    kind: Literal["rff", "rffb"]
    hyperparams: RbfHyperparams
    frequencies: np.ndarray
    biases: np.ndarray | None
    seed: int

    @property
    def feature_dim(self):
        n = self.frequencies.size
        return 2 * n if self.kind == "rff" else n

    def matrices(self, times):
        h = self.hyperparams
        s = self.frequencies.size
        freq = self.frequencies * SQRT2 / h.lengthscale
        if self.kind == "rff":
            amp = np.full(s, np.sqrt(h.rho / s))
            return _paired_features(amp, freq, times)
        t = np.atleast_1d(np.asarray(times, dtype=float))
        arg = np.outer(freq, t) + self.biases[:, None]
        a = np.sqrt(2.0 * h.rho / s)
        return FeatureMatrices(a * np.cos(arg), -a * freq[:, None] * np.sin(arg))


def rng_from_seed(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; the single RNG used across the package."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def rff_map(kind: str, h: RbfHyperparams, num_features: int, seed: int) -> RandomFeatureMap:
    """Random Fourier feature map with ``num_features`` output dimensions.

    ``rff`` draws ``num_features / 2`` frequencies (must be even), ``rffb``
    draws ``num_features`` (frequency, phase) pairs.
    """
    kind = kind.lower().replace("-", "")
    if num_features < 1:
        raise ValueError("num_features must be >= 1")
    rng = rng_from_seed(seed)
    if kind == "rff":
        if num_features % 2:
            raise ValueError("rff needs an even feature count (cos/sin pairs)")
        freq = rng.normal(0.0, np.sqrt(0.5), num_features // 2)
        return RandomFeatureMap("rff", h, freq, None, int(seed))
    if kind == "rffb":
        freq = rng.normal(0.0, np.sqrt(0.5), num_features)
        bias = rng.uniform(0.0, 2.0 * np.pi, num_features)
        return RandomFeatureMap("rffb", h, freq, bias, int(seed))
    raise ValueError(f"unknown random feature kind {kind!r}")


def rff_phi(fmap: RandomFeatureMap, t: float) -> np.ndarray:
    return fmap.matrices([t]).Phi[:, 0]


def make_feature_map(kind: str, h: RbfHyperparams, count: int, seed: int = 0):
    """Factory used by the experiment harness.

    For ``qff`` ``count`` is the quadrature order m (feature dimension 2m);
    for the random kinds it is the feature dimension.
    """
    kind = kind.lower().replace("-", "")
    if kind == "qff":
        return qff_map(h, count)
    return rff_map(kind, h, count, seed)
