"""Gradual, stability-aware magnitude-gradient pruning for selective SSMs."""

from .config import ExperimentConfig, load_config, parse_config
from .engine import PruneConfig, PruneResult, run_pruning
from .errors import (
    BenchError,
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
    PrunelabError,
    ShapeError,
)
from .estimator import PrunedSSMClassifier, PrunedSSMRegressor
from .masking import PruneMask, build_mask
from .model import ComponentKind, ModelConfig, ParamKey, init_model, load_checkpoint, save_checkpoint
from .schedule import ScheduleState, cubic_sparsity, sparsity_at
from .scoring import ImportanceScores, compute_scores, importance_base, importance_ssm_accumulated
from .spectral import analyze, eigenvalue_shift, perturbation_bound
from .stability import stability_correct_mask, stability_penalty, stability_score
from .tasks import TaskSpec, gen_task
from .training import OptimizerConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BenchError",
    "ComponentKind",
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "ExperimentConfig",
    "FormatError",
    "ImportanceScores",
    "ModelConfig",
    "OptimizerConfig",
    "ParamKey",
    "PruneConfig",
    "PruneMask",
    "PruneResult",
    "PrunedSSMClassifier",
    "PrunedSSMRegressor",
    "PrunelabError",
    "ScheduleState",
    "ShapeError",
    "TaskSpec",
    "analyze",
    "build_mask",
    "compute_scores",
    "cubic_sparsity",
    "eigenvalue_shift",
    "evaluate",
    "gen_task",
    "importance_base",
    "importance_ssm_accumulated",
    "init_model",
    "load_checkpoint",
    "load_config",
    "parse_config",
    "perturbation_bound",
    "run_pruning",
    "save_checkpoint",
    "sparsity_at",
    "stability_correct_mask",
    "stability_penalty",
    "stability_score",
    "train",
]
