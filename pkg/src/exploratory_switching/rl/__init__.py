"""Model-free policy evaluation: approximators, the learner and checkpoints."""

from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .learner import TrainConfig, TrainingLog, delta_xi, orthogonality_solution, policy_from_params, train, uniform_start
from .network import Architecture, LinearValue, MLPValue, built_in, gradient_check

__all__ = [
    "Architecture", "LinearValue", "MLPValue", "TrainConfig", "TrainingLog", "built_in", "delta_xi",
    "gradient_check", "load_checkpoint", "orthogonality_solution", "policy_from_params", "save_checkpoint",
    "train", "uniform_start",
]
