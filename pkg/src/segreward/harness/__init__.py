"""Desk-scale synthetic task, template policy and training loop."""

from .config import ConfigError, TrainConfig, load_config_file
from .oracle import MaskOracle
from .policy import TemplatePolicy
from .scenes import SceneConfig, build_suite, generate_query, generate_scene
from .training import ABLATION_ROWS, TrainResult, evaluate, policy_update, run_ablation, sensitivity_sweep, train

__all__ = [
    "ConfigError",
    "MaskOracle",
    "SceneConfig",
    "ABLATION_ROWS",
    "TemplatePolicy",
    "TrainConfig",
    "TrainResult",
    "build_suite",
    "evaluate",
    "generate_query",
    "generate_scene",
    "load_config_file",
    "policy_update",
    "run_ablation",
    "sensitivity_sweep",
    "train",
]
