"""Tabular laboratory for supervised learning from verifier feedback with implicit negative policies."""

from .errors import ConfigError, ContractError, DegenerateQuestion, DegeneratePartition, OracleUnavailable
from .objectives import ObjectiveConfig, batch_loss_and_grad
from .policy import TabularPolicy
from .rollout import RolloutGroup, collect_group
from .taskenv import TaskSpec, make_task, verify
from .trainer import TrainerConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DegenerateQuestion",
    "DegeneratePartition",
    "OracleUnavailable",
    "ObjectiveConfig",
    "batch_loss_and_grad",
    "TabularPolicy",
    "RolloutGroup",
    "collect_group",
    "TaskSpec",
    "make_task",
    "verify",
    "TrainerConfig",
    "run_experiment",
]
