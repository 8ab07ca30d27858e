"""Continual vision-language concept learning with layered low-rank
adapters and adversarial pseudo-replay, on a self-contained numpy stack."""

from .adapters import AdapterStack, LowRankAdapter
from .attack import AttackConfig, attack_image, attack_text, prob_drop_frozen
from .bench import TaskSpec, Triplet, generate_task, load_triplets, save_task
from .config import ExperimentConfig, load_config
from .errors import (ConfigError, ContractViolation, DataFormatError, DivergenceError,
                     IntegrityError, ShapeMismatch, StateError, VersionMismatch)
from .metrics import average_accuracy, compute_metrics, eval_triplets, eval_union, forgetting
from .model import ModelConfig, VLModel
from .optim import AdamW, OptimConfig, cosine_lr
from .rng import RngHub
from .tensor import Tensor, default_dtype, no_grad, set_default_dtype, using_dtype
from .train import RunResult, SequenceTrainer, order_sweep, replay_sweep, run_sequence

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AdapterStack", "AttackConfig", "ConfigError", "ContractViolation",
    "DataFormatError", "DivergenceError", "ExperimentConfig", "IntegrityError",
    "LowRankAdapter", "ModelConfig", "OptimConfig", "RngHub", "RunResult",
    "SequenceTrainer", "ShapeMismatch", "StateError", "TaskSpec", "Tensor", "Triplet",
    "VLModel", "VersionMismatch", "attack_image", "attack_text", "average_accuracy",
    "compute_metrics", "cosine_lr", "default_dtype", "eval_triplets", "eval_union",
    "forgetting", "generate_task", "load_config", "load_triplets", "no_grad",
    "order_sweep", "prob_drop_frozen", "replay_sweep", "run_sequence", "save_task",
    "set_default_dtype", "using_dtype",
]
