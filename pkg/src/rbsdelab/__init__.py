"""Reflected and doubly reflected BSDEs with regime switching and jumps on Markov chains.

Modules
-------
model      coefficients of the regime-switching jump diffusion and its generator
pathsim    Monte Carlo paths with thinned jumps and regime switches
chain      locally consistent Markov chain, martingale components, augmentation
data       barriers, drivers, stopping times and assembled problem data
solver     backward dynamic programming and tau-pasting
analysis   norms, a priori reports, adjoint identity, comparison
cli        batch front end
"""

__version__ = "0.1.0"

from .chain import ChainApprox, build_chain, martingale_components, sample_chain_paths
from .data import (CostFunctions, DeterministicTau, HittingTau, ProblemData, acceptance_cost, assemble,
                   lower_barrier_from_phi, markov_driver)
from .errors import (ConfigurationError, DataError, InvariantViolation, ModelError, ModelEvaluationError,
                     PreconditionError, RBSDELabError)
from .model import ModelSpec, SmoothFunction, acceptance_model, apply_generator, parametric_model
from .pathsim import PathBundle, compensator_check, generator_weak_error, simulate_paths
from .solver import SolutionQuadruple, check_invariants, kplus_density_check, paste_tau, solve
from .analysis import (adjoint_gamma, apriori_report, comparison_check, difference_norms,
                       linear_representation_check, norms)

__all__ = [
    "__version__",
    "ChainApprox", "build_chain", "martingale_components", "sample_chain_paths",
    "CostFunctions", "DeterministicTau", "HittingTau", "ProblemData", "acceptance_cost", "assemble",
    "lower_barrier_from_phi", "markov_driver",
    "ConfigurationError", "DataError", "InvariantViolation", "ModelError", "ModelEvaluationError",
    "PreconditionError", "RBSDELabError",
    "ModelSpec", "SmoothFunction", "acceptance_model", "apply_generator", "parametric_model",
    "PathBundle", "compensator_check", "generator_weak_error", "simulate_paths",
    "SolutionQuadruple", "check_invariants", "kplus_density_check", "paste_tau", "solve",
    "adjoint_gamma", "apriori_report", "comparison_check", "difference_norms", "linear_representation_check", "norms",
]
