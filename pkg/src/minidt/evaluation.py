"""Online rollouts with returns-to-go bookkeeping, and normalized scores
against per-task expert/random baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import TaskDataset, Trajectory
from .envs import EnvInstance, TaskSpec
from .model import Batch, ModelConfig, embed_batch, forward
from .params import ParamStore
from .prompts import AssembledPrompt, PromptVariant, assemble
from .tensor import ContractError, NumericError


def normalized_score(ret: float, random_ret: float, expert_ret: float) -> float:
    """100 at the expert baseline, 0 at the random baseline, linear in
    between (and beyond)."""
    if expert_ret == random_ret:
        raise ContractError("degenerate task: expert and random baselines coincide")
    return 100.0 * (ret - random_ret) / (expert_ret - random_ret)


@dataclass
class Policy:
    """A trained artifact: weights plus the preprocessing constants that
    travelled with them."""

    variant: PromptVariant
    config: ModelConfig
    params: ParamStore
    state_mean: np.ndarray
    state_std: np.ndarray
    rtg_scale: float


@dataclass
class TaskResult:
    task_id: int
    split: str  # seen | unseen
    mean_return: float
    normalized_score: float
    n_episodes: int


@dataclass
class EvalReport:
    per_task: list[TaskResult] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def finalize(self) -> "EvalReport":
        by_split: dict[str, list[float]] = {}
        for r in self.per_task:
            by_split.setdefault(r.split, []).append(r.normalized_score)
        self.aggregate = {
            split: {"mean_score": float(np.mean(v)), "std_score": float(np.std(v)), "n_tasks": len(v)}
            for split, v in by_split.items()
        }
        return self

    def to_dict(self) -> dict:
        return {
            "per_task": [vars(r).copy() for r in self.per_task],
            "aggregate": self.aggregate,
        }


def _history_batch(
    policy: Policy,
    rtg_hist: list[list[float]],
    state_hist: list[list[np.ndarray]],
    action_hist: list[list[np.ndarray]],
    prompts: list[AssembledPrompt],
) -> Batch:
    """Assemble the current K-step windows of every live episode."""
    K = policy.config.context_len
    E = len(rtg_hist)
    d_s, d_a = policy.config.state_dim, policy.config.action_dim
    rtg = np.zeros((E, K))
    states = np.zeros((E, K, d_s))
    actions = np.zeros((E, K, d_a))
    timesteps = np.zeros((E, K), dtype=np.int64)
    mask = np.zeros((E, K), dtype=bool)
    for e in range(E):
        t = len(state_hist[e])
        n = min(t, K)
        lo = t - n
        rtg[e, K - n:] = np.asarray(rtg_hist[e][lo:t]) / policy.rtg_scale
        states[e, K - n:] = (np.asarray(state_hist[e][lo:t]) - policy.state_mean) / policy.state_std
        acts = action_hist[e][lo:t]
        actions[e, K - n:] = np.asarray(acts)  # current step's action slot stays zero
        timesteps[e, K - n:] = np.arange(lo, t)
        mask[e, K - n:] = True
    return Batch.from_segments_arrays(rtg, states, actions, timesteps, mask, prompts)


def rollout_episodes(
    policy: Policy,
    prompts: list[AssembledPrompt],
    spec: TaskSpec,
    G: float,
    seeds: list[int],
    delayed_reward: bool = False,
) -> tuple[list[float], list[Trajectory]]:
    """Run one episode per seed in lockstep (fixed horizon). Returns-to-go
    start at G and decrease by each observed reward."""
    E = len(seeds)
    if len(prompts) != E:
        raise ContractError("one prompt per episode required")
    envs_ = [EnvInstance(spec, delayed_reward=delayed_reward) for _ in range(E)]
    states0 = [env.reset(seed) for env, seed in zip(envs_, seeds)]

    rtg_hist = [[float(G)] for _ in range(E)]
    state_hist = [[s] for s in states0]
    action_hist: list[list[np.ndarray]] = [[] for _ in range(E)]
    reward_hist: list[list[float]] = [[] for _ in range(E)]

    with T.no_grad():
        for t in range(spec.horizon):
            for e in range(E):
                action_hist[e].append(np.zeros(policy.config.action_dim))
            batch = _history_batch(policy, rtg_hist, state_hist, action_hist, prompts)
            tokens = embed_batch(batch, policy.variant, policy.config, policy.params)
            pred = forward(tokens, policy.config, policy.params, train_mode=False)
            acts = np.asarray(pred.data[:, -1, :], dtype=np.float64)
            if not np.isfinite(acts).all():
                raise NumericError(f"non-finite action at step {t} of task {spec.task_id}")
            acts = np.clip(acts, -1.0, 1.0)
            for e in range(E):
                action_hist[e][-1] = acts[e]
                s_next, r, done = envs_[e].step(acts[e])
                reward_hist[e].append(r)
                if not done:
                    rtg_hist[e].append(rtg_hist[e][-1] - r)
                    state_hist[e].append(s_next)

    returns = [float(np.sum(r)) for r in reward_hist]
    trajectories = [
        Trajectory.from_rollout(np.asarray(state_hist[e]), np.asarray(action_hist[e]), np.asarray(reward_hist[e]))
        for e in range(E)
    ]
    return returns, trajectories


def rollout_episode(
    policy: Policy,
    prompt: AssembledPrompt,
    env: EnvInstance,
    G: float,
    seed: int,
) -> tuple[float, Trajectory]:
    """Single-episode wrapper; the env instance supplies task and reward
    timing (its own state is not reused)."""
    returns, trajs = rollout_episodes(
        policy, [prompt], env.spec, G, [seed], delayed_reward=env.delayed_reward
    )
    return returns[0], trajs[0]


def _episode_seed(base_seed: int, task_id: int, episode: int) -> int:
    return int(np.random.SeedSequence(entropy=[base_seed, task_id, episode]).generate_state(1)[0])


def evaluate_split(
    policy: Policy,
    tasks: list[TaskSpec],
    baselines: dict[int, dict],
    split_name: str,
    episodes_per_task: int = 20,
    seed: int = 0,
    prompt_pools: Optional[dict[int, TaskDataset]] = None,
    delayed_reward: bool = False,
) -> EvalReport:
    """Roll out every task with per-episode seeds that depend only on
    (seed, task_id, episode), so results are independent of task order.
    No parameter is mutated: forward passes run with the tape disabled."""
    if episodes_per_task < 1:
        raise ContractError("episodes_per_task must be >= 1")
    report = EvalReport()
    for spec in tasks:
        if spec.task_id not in baselines:
            raise ContractError(f"no recorded baselines for task {spec.task_id}")
        base = baselines[spec.task_id]
        G = spec.target_return
        if G is None:
            raise ContractError(f"task {spec.task_id} has no target return")
        prompt_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[seed, spec.task_id, 985533]))
        prompts = []
        for _ in range(episodes_per_task):
            pool = prompt_pools.get(spec.task_id) if prompt_pools else None
            prompts.append(
                assemble(
                    policy.variant, spec, prompt_pool=pool, params=policy.params, rng=prompt_rng,
                    state_mean=policy.state_mean, state_std=policy.state_std, rtg_scale=policy.rtg_scale,
                )
            )
        seeds = [_episode_seed(seed, spec.task_id, k) for k in range(episodes_per_task)]
        returns, _ = rollout_episodes(policy, prompts, spec, G, seeds, delayed_reward)
        mean_ret = float(np.mean(returns))
        score = normalized_score(mean_ret, base["random_return"], base["expert_return"])
        report.per_task.append(TaskResult(spec.task_id, split_name, mean_ret, score, episodes_per_task))
    return report.finalize()
