"""Active model learning with informative reference trajectories.

Learns residual dynamics of a controlled system from data and generates
excitation-rich reference trajectories that minimize the learned model's
posterior variance over the task-relevant region, so that fewer
experiments yield better closed-loop tracking.
"""

__version__ = "0.1.0"

from .control import CompensationSolve, ControllerGains, default_gains
from .gp import (
    Dataset,
    Kernel,
    KernelBounds,
    Posterior,
    ResidualModel,
    fit_hyperparameters,
    kernel_eval,
    kmedoids_subsample,
)
from .pipeline import ExperimentConfig, SealedPlant, compare_arms, correlation_study
from .region import RegionEstimate, estimate_region, informative_cost
from .simulate import RolloutConfig, RolloutResult, rollout, tracking_error
from .systems import PlantSpec, Trajectory, builtin, builtin_task
from .trajgen import DeviationParams, SelectionConfig, select_informative

__all__ = [
    "CompensationSolve",
    "ControllerGains",
    "Dataset",
    "DeviationParams",
    "ExperimentConfig",
    "Kernel",
    "KernelBounds",
    "PlantSpec",
    "Posterior",
    "RegionEstimate",
    "ResidualModel",
    "RolloutConfig",
    "RolloutResult",
    "SealedPlant",
    "SelectionConfig",
    "Trajectory",
    "builtin",
    "builtin_task",
    "compare_arms",
    "correlation_study",
    "default_gains",
    "estimate_region",
    "fit_hyperparameters",
    "informative_cost",
    "kernel_eval",
    "kmedoids_subsample",
    "rollout",
    "select_informative",
    "tracking_error",
]
