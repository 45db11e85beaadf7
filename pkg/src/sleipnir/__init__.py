"""Quadrature Fourier features for GP regression with derivatives and ODIN."""

from .bounds import e_m, min_order_gprd, min_order_risk, theorem2_budget
from .features import qff_map, qff_matrices, qff_phi, qff_phi_prime, rff_map, rff_phi
from .gp_deriv import DerivObservationSet, approx_posterior, exact_posterior
from .kernels import RbfHyperparams, gram_matrices, kernel_d1, kernel_d2, kernel_eval, model_matrices
from .odin import (
    OdinProblem,
    exact_risk,
    fit_hyperparams,
    optimize,
    qff_maps_for,
    sleipnir_risk,
)
from .quadrature import gauss_hermite_rule, quadrature_apply
from .systems import NoiseSpec, generate_dataset, get_system, integrate, trajectory_rmse

__version__ = "0.1.0"
