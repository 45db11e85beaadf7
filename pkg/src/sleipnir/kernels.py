"""Exact RBF kernel, its derivatives and the GP-derivative model matrices.

Argument convention: for ``r = a - b``

* ``kernel_d1`` is d/da k(a, b)  (first argument),
* the second-argument derivative d/db k(a, b) is ``-kernel_d1``,
* ``kernel_d2`` is d^2/(da db) k(a, b).

Gram matrices follow the same convention: ``pC[i, j] = d/da k(t_i, t_j)`` and
``Cp[i, j] = d/db k(t_i, t_j)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


class LinAlgError(np.linalg.LinAlgError):
    """Factorisation failure carrying diagnostics."""


@dataclass(frozen=True)
class RbfHyperparams:
    rho: float
    lengthscale: float

    def __post_init__(self):
        if not (self.rho > 0 and np.isfinite(self.rho)):
            raise ValueError(f"rho must be positive and finite, got {self.rho!r}")
        if not (self.lengthscale > 0 and np.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive and finite, got {self.lengthscale!r}")


def kernel_eval(h: RbfHyperparams, r):
    r = np.asarray(r, dtype=float)
    return h.rho * np.exp(-0.5 * (r / h.lengthscale) ** 2)


def kernel_d1(h: RbfHyperparams, r):
    r = np.asarray(r, dtype=float)
    l2 = h.lengthscale ** 2
    return -h.rho * (r / l2) * np.exp(-0.5 * r * r / l2)


def kernel_d2(h: RbfHyperparams, r):
    r = np.asarray(r, dtype=float)
    l2 = h.lengthscale ** 2
    return h.rho * (1.0 / l2 - r * r / (l2 * l2)) * np.exp(-0.5 * r * r / l2)


@dataclass(frozen=True, eq=False)
class KernelMatrices:
    C: np.ndarray
    Cp: np.ndarray
    pC: np.ndarray
    Cpp: np.ndarray


def gram_matrices(h: RbfHyperparams, times) -> KernelMatrices:
    t = np.asarray(times, dtype=float).ravel()
    if t.size < 1:
        raise ValueError("need at least one time point")
    r = t[:, None] - t[None, :]
    C = kernel_eval(h, r)
    pC = kernel_d1(h, r)
    Cpp = kernel_d2(h, r)
    return KernelMatrices(C=C, Cp=-pC, pC=pC, Cpp=Cpp)


def cholesky(K, what="matrix", jitter=None):
    """Lower Cholesky factor, raising :class:`LinAlgError` with diagnostics."""
    try:
        return linalg.cholesky(K, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        diag = np.diag(K)
        msg = f"Cholesky factorisation of {what} failed ({exc})"
        if jitter is not None:
            msg += f"; jitter={jitter:g}"
        try:
            msg += f"; smallest eigenvalue={np.linalg.eigvalsh(K)[0]:.3e}"
        except np.linalg.LinAlgError:
            pass
        msg += f"; diagonal range=[{diag.min():.3e}, {diag.max():.3e}]"
        raise LinAlgError(msg) from exc


def cho_solve(L, b):
    return linalg.cho_solve((L, True), b, check_finite=False)


def logdet_from_cholesky(L):
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def default_jitter(h: RbfHyperparams) -> float:
    return 1e-6 * h.rho


@dataclass(frozen=True, eq=False)
class GpDerivModelMatrices:
    D: np.ndarray
    A: np.ndarray
    jitter: float


def model_matrices(km: KernelMatrices, jitter: float) -> GpDerivModelMatrices:
    """D = 'C (C + jitter I)^-1 and A = C'' - 'C (C + jitter I)^-1 C'."""
    if not jitter > 0:
        raise ValueError(f"jitter must be positive, got {jitter!r}")
    n = km.C.shape[0]
    L = cholesky(km.C + jitter * np.eye(n), "C + jitter*I", jitter=jitter)
    # (C + jI)^-1 C' ; D = (that)^T because 'C = C'^T and C + jI is symmetric
    S = cho_solve(L, km.Cp)
    D = S.T
    A = km.Cpp - km.pC @ S
    A = 0.5 * (A + A.T)
    return GpDerivModelMatrices(D=D, A=A, jitter=jitter)
