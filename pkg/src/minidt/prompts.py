"""Conditioning prefixes: task-parameter tokens, learned tokens,
demonstration segments, or nothing.

Five variants:

* ``task_learned`` - three task-parameter tokens plus three learned blocks
  of ``n`` tokens each, trained jointly with the model and frozen at test
  time.
* ``task``         - the three task-parameter tokens only (identical to
  ``task_learned`` with ``n = 0``).
* ``pure_learned`` - the learned blocks only; the task parameter is never
  an input.
* ``trajectory``   - the first H steps of J expert demonstrations of the
  target task (few-shot conditioning).
* ``none``         - no prefix at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .params import ParamStore
from .tensor import ContractError, Tensor

VARIANT_TAGS = ("task_learned", "task", "pure_learned", "trajectory", "none")

# CLI spellings of the variant tags
VARIANT_ALIASES = {
    "task-learned": "task_learned",
    "task_learned": "task_learned",
    "task": "task",
    "pure-learned": "pure_learned",
    "pure_learned": "pure_learned",
    "trajectory": "trajectory",
    "none": "none",
}


@dataclass
class PromptVariant:
    tag: str
    learned_len: int = 0  # tokens per learned block
    traj_episodes: int = 1  # J
    traj_seg_len: int = 2  # H
    order: str = "interleaved"  # interleaved: [z1,c,z2,c,z3,c]; blocked: [c,c,c,z1,z2,z3]

    def __post_init__(self):
        if self.tag not in VARIANT_TAGS:
            raise ContractError(f"unknown variant tag {self.tag!r}")
        if self.order not in ("interleaved", "blocked"):
            raise ContractError(f"unknown prompt order {self.order!r}")
        if self.learned_len < 0:
            raise ContractError("learned prompt length must be nonnegative")
        if self.learned_len > 0 and self.tag not in ("task_learned", "pure_learned"):
            raise ContractError(f"variant {self.tag!r} does not take a learned prompt")
        if self.tag == "pure_learned" and self.learned_len == 0:
            raise ContractError("pure_learned needs a learned prompt of positive length")
        if self.tag == "trajectory" and (self.traj_episodes < 1 or self.traj_seg_len < 1):
            raise ContractError("trajectory prompt needs J >= 1 and H >= 1")
        # a zero-length learned prompt reduces to the plain task variant
        if self.tag == "task_learned" and self.learned_len == 0:
            self.tag = "task"

    @property
    def uses_c(self) -> bool:
        return self.tag in ("task_learned", "task")

    @property
    def uses_z(self) -> bool:
        return self.tag in ("task_learned", "pure_learned") and self.learned_len > 0

    @property
    def uses_trajectory(self) -> bool:
        return self.tag == "trajectory"

    def prompt_len(self) -> int:
        if self.tag == "task_learned":
            return 3 * (self.learned_len + 1)
        if self.tag == "task":
            return 3
        if self.tag == "pure_learned":
            return 3 * self.learned_len
        if self.tag == "trajectory":
            return 3 * self.traj_seg_len * self.traj_episodes
        return 0


@dataclass
class TrajectoryPromptTokens:
    """Raw (rtg, state, action) steps cut from demonstration trajectories."""

    rtg: np.ndarray  # [P]
    states: np.ndarray  # [P, d_s]
    actions: np.ndarray  # [P, d_a]
    timesteps: np.ndarray  # [P] int


@dataclass
class AssembledPrompt:
    """Everything the embedding step needs for one task's prefix."""

    variant: PromptVariant
    c: Optional[np.ndarray] = None
    z_names: list = field(default_factory=list)
    traj: Optional[TrajectoryPromptTokens] = None


Z_NAMES = ("prompt_z1", "prompt_z2", "prompt_z3")
INIT_STD = 0.02


def init_learned_prompt(n: int, h: int, seed, store: ParamStore | None = None) -> list[Tensor]:
    """Three independent n x h blocks, i.i.d. normal(0, 0.02^2). With n = 0
    nothing is created and the learned prompt vanishes."""
    if n < 0 or h < 1:
        raise ContractError("need n >= 0 and h >= 1")
    if n == 0:
        return []
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    blocks = []
    for name in Z_NAMES:
        t = Tensor(rng.normal(0.0, INIT_STD, size=(n, h)).astype(np.float32), requires_grad=True)
        blocks.append(t)
        if store is not None:
            store.add(name, t)
    return blocks


def make_task_prompt(c: np.ndarray, params: ParamStore) -> Tensor:
    """Embed the task parameter once and replicate it into three tokens
    (identical before positional embeddings are added)."""
    from . import tensor as T

    c = np.asarray(c, dtype=params["embed_param_w"].dtype)
    d_c = params["embed_param_w"].shape[0]
    if c.shape != (d_c,):
        raise ContractError(f"task parameter has shape {c.shape}, embedding expects ({d_c},)")
    tok = T.add(T.matmul(Tensor(c.reshape(1, d_c)), params["embed_param_w"]), params["embed_param_b"])
    return T.concat([tok, tok, tok], axis=0)


def sample_trajectory_prompt(
    dataset,
    J: int,
    H: int,
    rng: np.random.Generator,
    state_mean: np.ndarray | None = None,
    state_std: np.ndarray | None = None,
    rtg_scale: float = 1.0,
) -> TrajectoryPromptTokens:
    """Draw J demonstrations uniformly from the task's prompt pool and take
    the first H steps of each; too-short draws are skipped and resampled."""
    pool = dataset.prompt_pool
    if not pool:
        raise ContractError(f"task {dataset.spec.task_id} has an empty prompt pool")
    usable = [t for t in pool if t.length >= H]
    if not usable:
        raise ContractError(f"no prompt trajectory of length >= {H} for task {dataset.spec.task_id}")
    mean = state_mean if state_mean is not None else dataset.state_mean
    std = state_std if state_std is not None else dataset.state_std
    rtg, states, actions, steps = [], [], [], []
    drawn = 0
    while drawn < J:
        t = pool[int(rng.integers(0, len(pool)))]
        if t.length < H:
            continue  # skip-and-resample
        rtg.append(t.rtg[:H] / rtg_scale)
        states.append((t.states[:H] - mean) / std)
        actions.append(t.actions[:H])
        steps.append(np.arange(H))
        drawn += 1
    return TrajectoryPromptTokens(
        np.concatenate(rtg), np.concatenate(states), np.concatenate(actions), np.concatenate(steps)
    )


def assemble(
    variant: PromptVariant,
    task,
    prompt_pool=None,
    params: ParamStore | None = None,
    rng: np.random.Generator | None = None,
    state_mean: np.ndarray | None = None,
    state_std: np.ndarray | None = None,
    rtg_scale: float = 1.0,
) -> AssembledPrompt:
    """Build the prefix for one task under the given variant."""
    if variant.uses_trajectory:
        if prompt_pool is None or not prompt_pool.prompt_pool:
            raise ContractError("trajectory variant needs a task dataset with a prompt pool")
        if rng is None:
            raise ContractError("trajectory variant needs an rng")
        traj = sample_trajectory_prompt(
            prompt_pool, variant.traj_episodes, variant.traj_seg_len, rng,
            state_mean, state_std, rtg_scale,
        )
        return AssembledPrompt(variant, traj=traj)
    c = np.asarray(task.c, dtype=np.float64) if variant.uses_c else None
    z_names = list(Z_NAMES) if variant.uses_z else []
    if z_names and params is not None:
        for name in z_names:
            if name not in params:
                raise ContractError(f"store is missing learned prompt block {name!r}")
    return AssembledPrompt(variant, c=c, z_names=z_names)
