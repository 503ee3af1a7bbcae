"""Asynchronous parallel SGD on a simulated one-sided communication fabric."""

from .asgd import AsgdConfig, asgd_optimize, final_aggregate, merge_external, parzen_accept
from .core import ContractViolation, ModelState, apply_step, seeded_rng
from .datagen import Dataset, GenSpec, generate, ground_truth_error
from .optimizers import RunConfig, batch_optimize, minibatch_sgd_optimize, sgd_optimize, simuparallel_sgd

__all__ = [
    "AsgdConfig",
    "ContractViolation",
    "Dataset",
    "GenSpec",
    "ModelState",
    "RunConfig",
    "apply_step",
    "asgd_optimize",
    "batch_optimize",
    "final_aggregate",
    "generate",
    "ground_truth_error",
    "merge_external",
    "minibatch_sgd_optimize",
    "parzen_accept",
    "seeded_rng",
    "sgd_optimize",
    "simuparallel_sgd",
]

__version__ = "0.1.0"
