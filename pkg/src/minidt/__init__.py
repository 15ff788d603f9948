"""Desk-scale decision transformer with task-parameter and learned-prompt
conditioning, built on a from-scratch numpy autodiff core."""

from . import data, envs, evaluation, gradcheck, model, optim, params, prompts, tensor, train
from .data import TaskDataset, Trajectory, compute_rtg, generate_dataset, sample_segment
from .envs import EnvInstance, TaskSpec, expert_action, make_split
from .evaluation import EvalReport, Policy, evaluate_split, normalized_score, rollout_episode
from .gradcheck import finite_difference_check
from .model import ModelConfig, bc_loss, causal_mask, embed_segment, forward, init_model_params
from .optim import AdamState, adam_step
from .params import ParamStore, load_checkpoint, save_checkpoint
from .prompts import AssembledPrompt, PromptVariant, assemble, init_learned_prompt
from .tensor import Tensor, backward, forward_op, no_grad
from .train import TrainConfig, train_run, train_step

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AssembledPrompt", "EnvInstance", "EvalReport", "ModelConfig",
    "ParamStore", "Policy", "PromptVariant", "TaskDataset", "TaskSpec", "Tensor",
    "TrainConfig", "Trajectory", "adam_step", "assemble", "backward", "bc_loss",
    "causal_mask", "compute_rtg", "embed_segment", "evaluate_split", "expert_action",
    "finite_difference_check", "forward", "forward_op", "generate_dataset",
    "init_learned_prompt", "init_model_params", "load_checkpoint", "make_split",
    "no_grad", "normalized_score", "rollout_episode", "sample_segment",
    "save_checkpoint", "train_run", "train_step",
]
