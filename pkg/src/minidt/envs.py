"""Point-mass contextual environments with scripted experts and task splits.

Four problems, all with actions in [-1, 1]^d_a and deterministic dynamics
(randomness only at reset):

* ``point_velocity`` - 1-D velocity control toward a hidden goal speed.
* ``point_direction`` - 2-D locomotion rewarded along a hidden heading.
* ``point_reach``     - 2-D position control toward a hidden goal point.
* ``grid_maze``       - 2-D navigation in a fixed 6x6 maze toward a hidden
  goal cell, sparse in-radius reward.

The task parameter c (goal speed / heading angle / goal point / goal cell)
parameterizes the reward only and is never part of the observation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import ContractError


PROBLEMS = ("point_velocity", "point_direction", "point_reach", "grid_maze")

# per problem: state dim, action dim, task-parameter dim, horizon
PROBLEM_DIMS = {
    "point_velocity": (1, 1, 1, 50),
    "point_direction": (4, 2, 1, 50),
    "point_reach": (2, 2, 2, 32),
    "grid_maze": (4, 2, 2, 64),
}

MAZE_SIZE = 6

# empty cells of the 6x6 maze, row-major; list position = task id
MAZE_EMPTY_CELLS = [
    (1, 1), (1, 2), (1, 5), (1, 6),
    (2, 1), (2, 2), (2, 4), (2, 5), (2, 6),
    (3, 2), (3, 3), (3, 4),
    (4, 1), (4, 2), (4, 4), (4, 5), (4, 6),
    (5, 1), (5, 3), (5, 4), (5, 6),
    (6, 1), (6, 2), (6, 3), (6, 5), (6, 6),
]
MAZE_TEST_IDS = [1, 6, 10, 12, 25]

_MAZE_EMPTY_SET = set(MAZE_EMPTY_CELLS)

MAZE_MAX_SPEED = 0.25
MAZE_GOAL_RADIUS = 0.5


@dataclass
class TaskSpec:
    """One task: a problem instance identified by its parameter vector."""

    problem: str
    task_id: int
    c: np.ndarray
    horizon: int
    target_return: Optional[float] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        d_c = PROBLEM_DIMS[self.problem][2]
        if self.c.shape != (d_c,):
            raise ContractError(f"{self.problem} expects c of shape ({d_c},), got {self.c.shape}")

    @property
    def state_dim(self) -> int:
        return PROBLEM_DIMS[self.problem][0]

    @property
    def action_dim(self) -> int:
        return PROBLEM_DIMS[self.problem][1]


def maze_cell_of(x: float, y: float) -> tuple[int, int]:
    return int(np.floor(x + 0.5)), int(np.floor(y + 0.5))


def maze_cell_blocked(cell: tuple[int, int]) -> bool:
    return cell not in _MAZE_EMPTY_SET


class EnvInstance:
    """A single rollout's mutable environment state."""

    def __init__(self, spec: TaskSpec, delayed_reward: bool = False):
        self.spec = spec
        self.delayed_reward = delayed_reward
        self.state: Optional[np.ndarray] = None
        self.t = 0
        self._pending_reward = 0.0
        self._done = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        p = self.spec.problem
        if p == "point_velocity":
            self.state = np.zeros(1)
        elif p == "point_direction":
            self.state = np.zeros(4)
        elif p == "point_reach":
            self.state = rng.uniform(-0.25, 0.25, size=2)
        elif p == "grid_maze":
            cell = MAZE_EMPTY_CELLS[int(rng.integers(0, len(MAZE_EMPTY_CELLS)))]
            pos = np.array(cell, dtype=np.float64) + rng.uniform(-0.5, 0.5, size=2)
            self.state = np.concatenate([pos, np.zeros(2)])
        else:
            raise ContractError(f"unknown problem {p!r}")
        self.t = 0
        self._pending_reward = 0.0
        self._done = False
        return self.state.copy()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if self._done:
            raise ContractError("step called on a finished episode; reset first")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        s = self.state
        c = self.spec.c
        p = self.spec.problem

        if p == "point_velocity":
            v = s[0] + 0.1 * a[0]
            reward = -abs(v - c[0])
            nxt = np.array([v])
        elif p == "point_direction":
            vel = 0.9 * s[2:] + 0.1 * a
            pos = s[:2] + vel
            reward = float(vel[0] * np.cos(c[0]) + vel[1] * np.sin(c[0]))
            nxt = np.concatenate([pos, vel])
        elif p == "point_reach":
            pos = s + 0.05 * a
            dx, dy = pos[0] - c[0], pos[1] - c[1]
            reward = -float(np.sqrt(dx * dx + dy * dy))
            nxt = pos
        elif p == "grid_maze":
            vel = np.clip(s[2:] + 0.1 * a, -MAZE_MAX_SPEED, MAZE_MAX_SPEED)
            pos, vel = _maze_move(s[:2], vel)
            dx, dy = pos[0] - c[0], pos[1] - c[1]
            reward = 1.0 if np.sqrt(dx * dx + dy * dy) <= MAZE_GOAL_RADIUS else 0.0
            nxt = np.concatenate([pos, vel])
        else:
            raise ContractError(f"unknown problem {p!r}")

        self.state = nxt
        self.t += 1
        done = self.t == self.spec.horizon
        self._done = done
        if self.delayed_reward:
            self._pending_reward += reward
            reward = self._pending_reward if done else 0.0
        return nxt.copy(), float(reward), done


def _maze_move(pos: np.ndarray, vel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance one axis at a time, clamping at walls (and killing that
    velocity component on contact)."""
    eps = 1e-9
    x, y = pos
    vx, vy = vel
    nx = x + vx
    if maze_cell_blocked(maze_cell_of(nx, y)):
        cx = maze_cell_of(x, y)[0]
        nx = np.clip(nx, cx - 0.5 + eps, cx + 0.5 - eps)
        vx = 0.0
    ny = y + vy
    if maze_cell_blocked(maze_cell_of(nx, ny)):
        cy = maze_cell_of(nx, y)[1]
        ny = np.clip(ny, cy - 0.5 + eps, cy + 0.5 - eps)
        vy = 0.0
    return np.array([nx, ny]), np.array([vx, vy])


# ---------------------------------------------------------------------------
# scripted experts


def expert_action(spec: TaskSpec, state: np.ndarray) -> np.ndarray:
    s = np.asarray(state, dtype=np.float64)
    c = spec.c
    p = spec.problem
    if p == "point_velocity":
        return np.clip(np.array([10.0 * (c[0] - s[0])]), -1.0, 1.0)
    if p == "point_direction":
        return np.array([np.cos(c[0]), np.sin(c[0])])
    if p == "point_reach":
        a = (c - s) / 0.05
        n = np.linalg.norm(a)
        if n > 1.0:
            a = a / n
        return np.clip(a, -1.0, 1.0)
    if p == "grid_maze":
        return _maze_expert_action(c, s)
    raise ContractError(f"unknown problem {p!r}")


_maze_dist_cache: dict[tuple[int, int], dict[tuple[int, int], int]] = {}


def _maze_bfs_distances(goal_cell: tuple[int, int]) -> dict[tuple[int, int], int]:
    if goal_cell in _maze_dist_cache:
        return _maze_dist_cache[goal_cell]
    if maze_cell_blocked(goal_cell):
        raise ContractError(f"maze goal cell {goal_cell} is a wall")
    dist = {goal_cell: 0}
    frontier = [goal_cell]
    while frontier:
        nxt = []
        for cell in frontier:
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nb = (cell[0] + dx, cell[1] + dy)
                if nb not in dist and not maze_cell_blocked(nb):
                    dist[nb] = dist[cell] + 1
                    nxt.append(nb)
        frontier = nxt
    _maze_dist_cache[goal_cell] = dist
    return dist


def _maze_expert_action(c: np.ndarray, s: np.ndarray) -> np.ndarray:
    goal_cell = (int(round(c[0])), int(round(c[1])))
    dist = _maze_bfs_distances(goal_cell)
    pos, vel = s[:2], s[2:]
    cur = maze_cell_of(pos[0], pos[1])
    if cur not in dist:
        raise ContractError(f"maze position {pos} is outside the reachable region")
    if cur == goal_cell:
        waypoint = np.asarray(c, dtype=np.float64)
    else:
        best = None
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = (cur[0] + dx, cur[1] + dy)
            if nb in dist and (best is None or dist[nb] < dist[best]):
                best = nb
        waypoint = np.array(best, dtype=np.float64)
    v_des = np.clip(2.0 * (waypoint - pos), -MAZE_MAX_SPEED, MAZE_MAX_SPEED)
    return np.clip((v_des - vel) / 0.1, -1.0, 1.0)


def random_action(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=spec.action_dim)


# ---------------------------------------------------------------------------
# splits


def _interleaved_test_indices(n_total: int, n_test: int) -> list[int]:
    idx = [int(np.floor((j + 1) * n_total / (n_test + 1))) for j in range(n_test)]
    if len(set(idx)) != n_test or idx[0] == 0 or idx[-1] >= n_total:
        raise ContractError(f"cannot interleave {n_test} test tasks among {n_total}")
    return idx


def make_split(
    problem: str, n_train: int, n_test: int, seed: int = 0
) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Deterministic train/test task split with test parameters interleaved
    strictly between training ones (the maze split is fixed)."""
    if problem not in PROBLEMS:
        raise ContractError(f"unknown problem {problem!r}")
    if n_train < 1 or n_test < 1:
        raise ContractError("need at least one train and one test task")
    horizon = PROBLEM_DIMS[problem][3]

    if problem == "grid_maze":
        if n_train + n_test > len(MAZE_EMPTY_CELLS):
            raise ContractError(f"maze has only {len(MAZE_EMPTY_CELLS)} empty cells")
        if (n_train, n_test) != (len(MAZE_EMPTY_CELLS) - len(MAZE_TEST_IDS), len(MAZE_TEST_IDS)):
            raise ContractError("grid_maze uses the fixed 21/5 goal split; pass n_train=21 n_test=5")
        train, test = [], []
        for task_id, cell in enumerate(MAZE_EMPTY_CELLS):
            spec = TaskSpec("grid_maze", task_id, np.array(cell, dtype=np.float64), horizon)
            (test if task_id in MAZE_TEST_IDS else train).append(spec)
        return train, test

    n_total = n_train + n_test
    if problem == "point_velocity":
        values = np.linspace(0.1, 1.0, n_total)
        cs = values[:, None]
    elif problem == "point_direction":
        angles = np.linspace(0.0, 2.0 * np.pi, n_total, endpoint=False)
        cs = angles[:, None]
    else:  # point_reach
        angles = np.linspace(0.0, 2.0 * np.pi, n_total, endpoint=False)
        cs = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    test_idx = set(_interleaved_test_indices(n_total, n_test))
    train, test = [], []
    for i in range(n_total):
        spec = TaskSpec(problem, i, cs[i], horizon)
        (test if i in test_idx else train).append(spec)
    return train, test


# ---------------------------------------------------------------------------
# baseline returns


def rollout_policy(
    spec: TaskSpec,
    policy: Callable[[np.ndarray], np.ndarray],
    seed: int,
    delayed_reward: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run one full episode; returns (states [T+1, d_s], actions [T, d_a],
    rewards [T])."""
    env = EnvInstance(spec, delayed_reward=delayed_reward)
    s = env.reset(seed)
    states, actions, rewards = [s], [], []
    done = False
    while not done:
        a = policy(states[-1])
        s, r, done = env.step(a)
        states.append(s)
        actions.append(np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0))
        rewards.append(r)
    return np.array(states), np.array(actions), np.array(rewards)


def estimate_baselines(
    spec: TaskSpec, n_episodes: int = 100, seed: int = 0, delayed_reward: bool = False
) -> dict:
    """Monte-Carlo expert and uniform-random returns for one task."""
    expert_returns = []
    random_returns = []
    for k in range(n_episodes):
        _, _, rew = rollout_policy(
            spec, lambda s: expert_action(spec, s), seed=seed * 100003 + k, delayed_reward=delayed_reward
        )
        expert_returns.append(rew.sum())
        rng = np.random.default_rng((seed * 100003 + k) ^ 0x5EED)
        _, _, rew = rollout_policy(
            spec, lambda s: random_action(spec, rng), seed=seed * 100003 + k, delayed_reward=delayed_reward
        )
        random_returns.append(rew.sum())
    return {
        "expert_return": float(np.mean(expert_returns)),
        "expert_return_max": float(np.max(expert_returns)),
        "random_return": float(np.mean(random_returns)),
        "random_return_std": float(np.std(random_returns)),
    }
