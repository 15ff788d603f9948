"""Offline trajectory datasets: generation, storage, and segment sampling.

Each task gets one JSON document holding its demonstration trajectories,
a disjoint pool of expert prompt trajectories, and normalization
statistics. Returns-to-go are plain suffix sums of rewards, computed in
double precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import envs
from .envs import TaskSpec, expert_action, random_action, rollout_policy
from .tensor import ContractError


class DatasetFormatError(ValueError):
    """A dataset or split file failed validation."""


def compute_rtg(rewards) -> np.ndarray:
    """Suffix sums: rtg[t] = sum of rewards from step t to the end."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return np.zeros(0)
    return np.cumsum(r[::-1])[::-1].copy()


@dataclass
class Trajectory:
    states: np.ndarray  # [T, d_s]
    actions: np.ndarray  # [T, d_a]
    rewards: np.ndarray  # [T]
    rtg: np.ndarray  # [T]

    @classmethod
    def from_rollout(cls, states, actions, rewards) -> "Trajectory":
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64)
        if states.shape[0] == actions.shape[0] + 1:
            states = states[:-1]  # drop terminal observation; tokens pair (rtg, s, a)
        return cls(states, actions, rewards, compute_rtg(rewards))

    @property
    def length(self) -> int:
        return self.states.shape[0]

    @property
    def total_return(self) -> float:
        return float(self.rtg[0]) if self.length else 0.0


@dataclass
class TaskDataset:
    spec: TaskSpec
    quality: str  # expert | medium | random
    trajectories: list[Trajectory]
    prompt_pool: list[Trajectory]
    state_mean: np.ndarray
    state_std: np.ndarray
    delayed_reward: bool = False


@dataclass
class Segment:
    """A K-step training window, left-padded with zeros."""

    rtg: np.ndarray  # [K]
    states: np.ndarray  # [K, d_s]
    actions: np.ndarray  # [K, d_a]
    timesteps: np.ndarray  # [K] int
    loss_mask: np.ndarray  # [K] bool, True on real steps


QUALITIES = ("expert", "medium", "random")
MEDIUM_NOISE_STD = 0.3


def _tier_policy(spec: TaskSpec, quality: str, rng: np.random.Generator):
    if quality == "expert":
        return lambda s: expert_action(spec, s)
    if quality == "medium":
        return lambda s: np.clip(
            expert_action(spec, s) + rng.normal(0.0, MEDIUM_NOISE_STD, size=spec.action_dim),
            -1.0,
            1.0,
        )
    if quality == "random":
        return lambda s: random_action(spec, rng)
    raise ContractError(f"unknown quality {quality!r}; expected one of {QUALITIES}")


def generate_dataset(
    spec: TaskSpec,
    quality: str = "expert",
    n_traj: int = 50,
    n_prompt: int = 5,
    seed: int = 0,
    delayed_reward: bool = False,
) -> TaskDataset:
    """Roll out demonstrations with the tier policy plus an expert-quality
    prompt pool; normalization stats come from the demonstrations only."""
    if n_traj < 0 or n_prompt < 0:
        raise ContractError("n_traj and n_prompt must be nonnegative")
    base = np.random.SeedSequence([seed, spec.task_id]).generate_state(1)[0]

    trajectories = []
    for k in range(n_traj):
        rng = np.random.default_rng([base, 1, k])
        policy = _tier_policy(spec, quality, rng)
        s, a, r = rollout_policy(spec, policy, seed=int(base) + 7919 * k + 1, delayed_reward=delayed_reward)
        trajectories.append(Trajectory.from_rollout(s, a, r))

    prompt_pool = []
    for k in range(n_prompt):
        policy = _tier_policy(spec, "expert", np.random.default_rng([base, 2, k]))
        s, a, r = rollout_policy(
            spec, policy, seed=int(base) + 7919 * (n_traj + k) + 1, delayed_reward=delayed_reward
        )
        prompt_pool.append(Trajectory.from_rollout(s, a, r))

    if trajectories:
        all_states = np.concatenate([t.states for t in trajectories], axis=0)
        state_mean = all_states.mean(axis=0)
        state_std = np.maximum(all_states.std(axis=0), 1e-6)
    else:
        state_mean = np.zeros(spec.state_dim)
        state_std = np.ones(spec.state_dim)

    ds = TaskDataset(spec, quality, trajectories, prompt_pool, state_mean, state_std, delayed_reward)
    expert_like = trajectories if quality == "expert" else []
    returns = [t.total_return for t in list(expert_like) + list(prompt_pool)]
    if returns:
        ds.spec.target_return = float(max(returns))
    return ds


def pooled_state_stats(datasets: list[TaskDataset]) -> tuple[np.ndarray, np.ndarray]:
    """Mean/std over the union of all demonstration states (prompt pools
    excluded), used both in training and at evaluation time."""
    states = [t.states for ds in datasets for t in ds.trajectories]
    if not states:
        raise ContractError("no trajectories to compute statistics from")
    all_states = np.concatenate(states, axis=0)
    return all_states.mean(axis=0), np.maximum(all_states.std(axis=0), 1e-6)


def sample_segment(
    dataset: TaskDataset,
    K: int,
    rng: np.random.Generator,
    state_mean: np.ndarray | None = None,
    state_std: np.ndarray | None = None,
    rtg_scale: float = 1.0,
) -> Segment:
    """Draw one K-step window: trajectory chosen with probability
    proportional to its length, end index uniform, left-padded to K."""
    if not dataset.trajectories:
        raise ContractError("cannot sample from an empty dataset")
    lengths = np.array([t.length for t in dataset.trajectories])
    flat = int(rng.integers(0, lengths.sum()))
    traj_idx = int(np.searchsorted(np.cumsum(lengths), flat, side="right"))
    t_end = flat - (int(np.cumsum(lengths)[traj_idx - 1]) if traj_idx else 0)
    return cut_segment(dataset.trajectories[traj_idx], t_end, K, state_mean if state_mean is not None else dataset.state_mean, state_std if state_std is not None else dataset.state_std, rtg_scale)


def cut_segment(
    traj: Trajectory,
    t_end: int,
    K: int,
    state_mean: np.ndarray,
    state_std: np.ndarray,
    rtg_scale: float = 1.0,
) -> Segment:
    start = max(0, t_end - K + 1)
    n = t_end - start + 1
    d_s = traj.states.shape[1]
    d_a = traj.actions.shape[1]
    rtg = np.zeros(K)
    states = np.zeros((K, d_s))
    actions = np.zeros((K, d_a))
    timesteps = np.zeros(K, dtype=np.int64)
    mask = np.zeros(K, dtype=bool)
    rtg[K - n:] = traj.rtg[start : t_end + 1] / rtg_scale
    states[K - n:] = (traj.states[start : t_end + 1] - state_mean) / state_std
    actions[K - n:] = traj.actions[start : t_end + 1]
    timesteps[K - n:] = np.arange(start, t_end + 1)
    mask[K - n:] = True
    return Segment(rtg, states, actions, timesteps, mask)


# ---------------------------------------------------------------------------
# file formats


def dataset_filename(spec: TaskSpec, quality: str) -> str:
    return f"{spec.problem}_task{spec.task_id}_{quality}.json"


def _traj_to_lists(t: Trajectory) -> dict:
    return {
        "states": t.states.tolist(),
        "actions": t.actions.tolist(),
        "rewards": t.rewards.tolist(),
        "rtg": t.rtg.tolist(),
    }


def _traj_from_lists(obj: dict, d_s: int, d_a: int, where: str) -> Trajectory:
    try:
        states = np.asarray(obj["states"], dtype=np.float64)
        actions = np.asarray(obj["actions"], dtype=np.float64)
        rewards = np.asarray(obj["rewards"], dtype=np.float64)
    except (KeyError, ValueError) as e:
        raise DatasetFormatError(f"{where}: malformed trajectory ({e})") from e
    if states.ndim != 2 or states.shape[1] != d_s:
        raise DatasetFormatError(f"{where}: states have dimension {states.shape}, expected (*, {d_s})")
    if actions.ndim != 2 or actions.shape[1] != d_a:
        raise DatasetFormatError(f"{where}: actions have dimension {actions.shape}, expected (*, {d_a})")
    if "rtg" in obj:
        rtg = np.asarray(obj["rtg"], dtype=np.float64)
    else:
        rtg = compute_rtg(rewards)  # derived field, rebuild when absent
    return Trajectory(states, actions, rewards, rtg)


def write_dataset(dataset: TaskDataset, path: str | Path):
    doc = {
        "task_id": dataset.spec.task_id,
        "problem": dataset.spec.problem,
        "parameter": dataset.spec.c.tolist(),
        "quality": dataset.quality,
        "horizon": dataset.spec.horizon,
        "target_return": dataset.spec.target_return,
        "delayed_reward": dataset.delayed_reward,
        "state_mean": dataset.state_mean.tolist(),
        "state_std": dataset.state_std.tolist(),
        "trajectories": [_traj_to_lists(t) for t in dataset.trajectories],
        "prompt_pool": [_traj_to_lists(t) for t in dataset.prompt_pool],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def read_dataset(path: str | Path) -> TaskDataset:
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    for key in ("task_id", "problem", "parameter", "quality", "horizon", "trajectories", "prompt_pool"):
        if key not in doc:
            raise DatasetFormatError(f"{path}: missing field {key!r}")
    if doc["problem"] not in envs.PROBLEMS:
        raise DatasetFormatError(f"{path}: unknown problem {doc['problem']!r}")
    spec = TaskSpec(
        doc["problem"], int(doc["task_id"]), np.asarray(doc["parameter"], dtype=np.float64),
        int(doc["horizon"]), doc.get("target_return"),
    )
    d_s, d_a = spec.state_dim, spec.action_dim
    trajectories = [
        _traj_from_lists(t, d_s, d_a, f"{path}: trajectories[{i}]")
        for i, t in enumerate(doc["trajectories"])
    ]
    prompt_pool = [
        _traj_from_lists(t, d_s, d_a, f"{path}: prompt_pool[{i}]")
        for i, t in enumerate(doc["prompt_pool"])
    ]
    if trajectories:
        state_mean = np.asarray(doc["state_mean"], dtype=np.float64)
        state_std = np.asarray(doc["state_std"], dtype=np.float64)
        if state_mean.shape != (d_s,) or state_std.shape != (d_s,):
            raise DatasetFormatError(f"{path}: state stats have wrong dimension")
    else:
        state_mean = np.zeros(d_s)
        state_std = np.ones(d_s)
    return TaskDataset(
        spec, doc["quality"], trajectories, prompt_pool, state_mean, state_std,
        bool(doc.get("delayed_reward", False)),
    )


def write_split_file(path: str | Path, problem: str, records: list[dict], seed: int, delayed_reward: bool):
    """Split file: per-task parameters, target returns, expert/random
    baselines, and the seen/unseen assignment."""
    doc = {"problem": problem, "seed": seed, "delayed_reward": delayed_reward, "tasks": records}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_split_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    for key in ("problem", "tasks"):
        if key not in doc:
            raise DatasetFormatError(f"{path}: missing field {key!r}")
    return doc


def split_task_specs(split: dict, which: str) -> list[TaskSpec]:
    specs = []
    for rec in split["tasks"]:
        if rec["split"] != which:
            continue
        specs.append(
            TaskSpec(
                split["problem"], int(rec["task_id"]), np.asarray(rec["parameter"]),
                int(rec["horizon"]), float(rec["target_return"]),
            )
        )
    return specs
