"""Deterministic federated learning simulator.

Strategies range from uniform-sampling baselines to gradient-correlation
weighted aggregation, plus a numeric lab that checks the per-round
loss-decrease guarantees on small instances.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, parse_config
from .data import DataShard, Dataset, SyntheticSpec, generate_synthetic, partition_by_label
from .local_solver import DeviceProfile, LocalUpdate, ParticipationTimeout, local_solve
from .models import LossModel, ProximalObjective, finite_diff_gradient
from .numerics import RngStream, dot, l2_norm, l2_norm_sq, sample_categorical, softmax
from .orchestrator import (
    RoundRecord,
    SimResult,
    grid_search,
    rounds_to_accuracy,
    run_experiment,
    simulate,
)
from .selection import (
    SelectionDistribution,
    lb_near_optimal_distribution,
    lbh_distribution,
    norm_proportional_distribution,
    uniform_distribution,
)

__all__ = [
    "DataShard",
    "Dataset",
    "DeviceProfile",
    "ExperimentConfig",
    "LocalUpdate",
    "LossModel",
    "ParticipationTimeout",
    "ProximalObjective",
    "RngStream",
    "RoundRecord",
    "SelectionDistribution",
    "SimResult",
    "SyntheticSpec",
    "dot",
    "finite_diff_gradient",
    "generate_synthetic",
    "grid_search",
    "l2_norm",
    "l2_norm_sq",
    "lb_near_optimal_distribution",
    "lbh_distribution",
    "load_config",
    "local_solve",
    "norm_proportional_distribution",
    "parse_config",
    "partition_by_label",
    "rounds_to_accuracy",
    "run_experiment",
    "sample_categorical",
    "simulate",
    "softmax",
    "uniform_distribution",
    "__version__",
]
