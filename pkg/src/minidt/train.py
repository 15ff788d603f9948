"""Multi-task behavior-cloning trainer: one combined gradient step over a
per-task mini-batch union, jointly updating model weights and any learned
prompt blocks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import TaskDataset, pooled_state_stats, sample_segment
from .model import Batch, ModelConfig, bc_loss, embed_batch, forward, init_model_params
from .optim import AdamState, adam_step
from .params import ParamStore, save_checkpoint
from .prompts import AssembledPrompt, PromptVariant, assemble
from .tensor import ContractError, NumericError


@dataclass
class TrainConfig:
    """Everything a reproducible run needs, in one flat record."""

    variant: str = "task"
    prompt_len: int = 0
    traj_episodes: int = 1
    traj_seg_len: int = 2
    prompt_order: str = "interleaved"
    context_len: int = 20
    n_layers: int = 3
    n_heads: int = 1
    embed_dim: int = 64
    dropout: float = 0.1
    batch_per_task: int = 16
    grad_steps_per_iter: int = 10
    max_iters: int = 2000
    eval_every: int = 1000
    eval_episodes_during_training: int = 5  # scaled down from the final 20-episode protocol
    seed: int = 1
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    weight_decay: float = 1e-4
    rtg_scale: float = 0.0  # 0 means auto: max |target return| over training tasks
    sparse_reward: bool = False

    def prompt_variant(self) -> PromptVariant:
        return PromptVariant(
            self.variant, self.prompt_len, self.traj_episodes, self.traj_seg_len, self.prompt_order
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRow:
    iteration: int
    phase: str  # train | eval
    variant: str
    split: str  # seen | unseen | -
    task_id: int  # -1 for aggregates
    value_kind: str  # loss | mean_return | normalized_score
    value: float


METRICS_HEADER = "iteration,phase,variant,split,task_id,value_kind,value"


def write_metrics_csv(rows: list[MetricsRow], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for r in rows:
            f.write(f"{r.iteration},{r.phase},{r.variant},{r.split},{r.task_id},{r.value_kind},{r.value!r}\n")


def _derive_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=[seed, stream]))


def train_step(
    datasets: list[TaskDataset],
    variant: PromptVariant,
    model_config: ModelConfig,
    params: ParamStore,
    opt: AdamState,
    sample_rng: np.random.Generator,
    dropout_rng: np.random.Generator,
    state_mean: np.ndarray,
    state_std: np.ndarray,
    rtg_scale: float,
    batch_per_task: int = 16,
    z_grad_hook: Optional[Callable[[float], None]] = None,
) -> float:
    """One combined gradient step: ``batch_per_task`` segments from every
    task, each paired with that task's prompt, one backward, one Adam
    update. Returns the scalar loss."""
    if not datasets:
        raise ContractError("train_step needs at least one task dataset")
    K = model_config.context_len
    segments = []
    prompt_rows: list[AssembledPrompt] = []
    for ds in datasets:
        task_prompt = None
        if not variant.uses_trajectory:
            task_prompt = assemble(variant, ds.spec, params=params)
        for _ in range(batch_per_task):
            segments.append(sample_segment(ds, K, sample_rng, state_mean, state_std, rtg_scale))
            if variant.uses_trajectory:
                prompt_rows.append(
                    assemble(variant, ds.spec, prompt_pool=ds, rng=sample_rng,
                             state_mean=state_mean, state_std=state_std, rtg_scale=rtg_scale)
                )
            else:
                prompt_rows.append(task_prompt)

    batch = Batch.from_segments(segments, prompt_rows)
    tokens = embed_batch(batch, variant, model_config, params)
    pred = forward(tokens, model_config, params, train_mode=True, rng=dropout_rng)
    loss = bc_loss(pred, batch.actions, batch.loss_mask)
    loss_value = float(loss.data[0])
    T.backward(loss, params)
    if z_grad_hook is not None and variant.uses_z:
        z_norm = float(
            np.sqrt(sum(float((params[n].grad ** 2).sum()) for n in ("prompt_z1", "prompt_z2", "prompt_z3")))
        )
        z_grad_hook(z_norm)
    adam_step(params, opt)
    return loss_value


def build_model_config(config: TrainConfig, datasets: list[TaskDataset]) -> ModelConfig:
    spec = datasets[0].spec
    for ds in datasets[1:]:
        if (ds.spec.state_dim, ds.spec.action_dim, ds.spec.c.shape) != (
            spec.state_dim, spec.action_dim, spec.c.shape,
        ):
            raise ContractError("all task datasets must share state/action/parameter dimensions")
    return ModelConfig(
        context_len=config.context_len,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        embed_dim=config.embed_dim,
        dropout=config.dropout,
        state_dim=spec.state_dim,
        action_dim=spec.action_dim,
        param_dim=spec.c.shape[0],
        max_timestep=max(ds.spec.horizon for ds in datasets),
    )


def resolve_rtg_scale(config: TrainConfig, datasets: list[TaskDataset]) -> float:
    if config.rtg_scale > 0:
        return config.rtg_scale
    targets = [abs(ds.spec.target_return) for ds in datasets if ds.spec.target_return is not None]
    if not targets:
        raise ContractError("no target returns recorded; set rtg_scale explicitly")
    return float(max(targets))


def train_run(
    config: TrainConfig,
    datasets: list[TaskDataset],
    eval_hook: Optional[Callable[[int, ParamStore], list[MetricsRow]]] = None,
    out_dir: str | Path | None = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[ParamStore, list[MetricsRow]]:
    """Full training loop; optionally invokes ``eval_hook`` every
    ``eval_every`` iterations (and after the last one) and writes the run
    directory: config snapshot, checkpoint, metrics.csv."""
    variant = config.prompt_variant()
    if variant.uses_trajectory:
        for ds in datasets:
            if not ds.prompt_pool:
                raise ContractError(f"trajectory variant needs prompt pools; task {ds.spec.task_id} has none")
    model_config = build_model_config(config, datasets)
    state_mean, state_std = pooled_state_stats(datasets)
    rtg_scale = resolve_rtg_scale(config, datasets)

    params = init_model_params(model_config, variant, config.seed)
    opt = AdamState(
        base_lr=config.base_lr, warmup_steps=config.warmup_steps, weight_decay=config.weight_decay
    )
    sample_rng = _derive_rng(config.seed, 1)
    dropout_rng = _derive_rng(config.seed, 2)

    rows: list[MetricsRow] = []
    for iteration in range(1, config.max_iters + 1):
        losses = []
        for _ in range(config.grad_steps_per_iter):
            loss = train_step(
                datasets, variant, model_config, params, opt, sample_rng, dropout_rng,
                state_mean, state_std, rtg_scale, config.batch_per_task,
            )
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at iteration {iteration}")
            losses.append(loss)
        rows.append(MetricsRow(iteration, "train", variant.tag, "-", -1, "loss", float(np.mean(losses))))
        if log is not None and (iteration % 100 == 0 or iteration == 1):
            log(f"iter {iteration}/{config.max_iters} loss {np.mean(losses):.6f}")
        if eval_hook is not None and (iteration % config.eval_every == 0 or iteration == config.max_iters):
            rows.extend(eval_hook(iteration, params))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {
            "config": asdict(config),
            "resolved": {
                "rtg_scale": rtg_scale,
                "state_mean": state_mean.tolist(),
                "state_std": state_std.tolist(),
                "model": asdict(model_config),
                "n_train_tasks": len(datasets),
                "scaled_down_from_reference": {
                    "embed_dim": [128, config.embed_dim],
                    "warmup_steps": [10000, config.warmup_steps],
                    "max_iters": [6000, config.max_iters],
                },
            },
        }
        with open(out_dir / "config.json", "w") as f:
            json.dump(snapshot, f, indent=1)
            f.write("\n")
        save_checkpoint(params, out_dir / "checkpoint")
        write_metrics_csv(rows, out_dir / "metrics.csv")
    return params, rows
