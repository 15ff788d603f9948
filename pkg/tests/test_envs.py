"""Environment dynamics, scripted experts, splits, and reward invariants."""

import math

import numpy as np
import pytest

from minidt.envs import (
    MAZE_EMPTY_CELLS,
    MAZE_TEST_IDS,
    PROBLEM_DIMS,
    PROBLEMS,
    EnvInstance,
    TaskSpec,
    estimate_baselines,
    expert_action,
    make_split,
    maze_cell_blocked,
    maze_cell_of,
    rollout_policy,
)
from minidt.tensor import ContractError


def spec_of(problem, c, task_id=0):
    return TaskSpec(problem, task_id, np.asarray(c, dtype=np.float64), PROBLEM_DIMS[problem][3])


class TestReset:
    def test_point_velocity_starts_at_rest(self):
        env = EnvInstance(spec_of("point_velocity", [0.5]))
        np.testing.assert_array_equal(env.reset(seed=3), [0.0])

    def test_point_direction_starts_at_origin(self):
        env = EnvInstance(spec_of("point_direction", [1.0]))
        np.testing.assert_array_equal(env.reset(seed=3), [0.0, 0.0, 0.0, 0.0])

    def test_point_reach_seeded_reset_repeats(self):
        env = EnvInstance(spec_of("point_reach", [1.0, 0.0]))
        s1, s2 = env.reset(seed=11), env.reset(seed=11)
        np.testing.assert_array_equal(s1, s2)
        assert np.all(np.abs(s1) <= 0.25)

    def test_maze_start_never_in_wall(self):
        env = EnvInstance(spec_of("grid_maze", [3.0, 3.0]))
        for seed in range(200):
            s = env.reset(seed=seed)
            assert not maze_cell_blocked(maze_cell_of(s[0], s[1]))


class TestStep:
    def test_point_velocity_step(self):
        env = EnvInstance(spec_of("point_velocity", [0.1]))
        env.reset(seed=0)
        s, r, done = env.step(np.array([1.0]))
        np.testing.assert_allclose(s, [0.1])
        assert r == pytest.approx(0.0)
        assert not done

    def test_point_direction_reward_is_projection(self):
        env = EnvInstance(spec_of("point_direction", [0.0]))
        env.reset(seed=0)
        env.state = np.array([0.0, 0.0, 0.5, 0.0])
        _, r, _ = env.step(np.array([0.5 / 0.1 * (1 - 0.9), 0.0]))  # keeps vel at (0.5, 0)
        assert r == pytest.approx(0.5, abs=1e-9)

    def test_maze_threshold_reward(self):
        spec = spec_of("grid_maze", [3.0, 3.0])
        env = EnvInstance(spec)
        env.reset(seed=0)
        env.state = np.array([3.3, 3.0, 0.0, 0.0])
        _, r, _ = env.step(np.zeros(2))
        assert r == 1.0
        env.reset(seed=0)
        env.state = np.array([3.0, 2.2, 0.0, 0.0])  # 0.8 away, beyond the radius
        _, r, _ = env.step(np.zeros(2))
        assert r == 0.0

    def test_episode_ends_exactly_at_horizon(self):
        spec = spec_of("point_reach", [1.0, 0.0])
        env = EnvInstance(spec)
        env.reset(seed=0)
        for t in range(spec.horizon):
            _, _, done = env.step(np.zeros(2))
            assert done == (t == spec.horizon - 1)
        with pytest.raises(ContractError, match="finished"):
            env.step(np.zeros(2))

    def test_actions_clipped_to_box(self):
        env = EnvInstance(spec_of("point_velocity", [1.0]))
        env.reset(seed=0)
        s, _, _ = env.step(np.array([10.0]))
        np.testing.assert_allclose(s, [0.1])

    def test_delayed_reward_moves_sum_to_final_step(self):
        spec = spec_of("point_reach", [0.5, 0.5])
        dense = EnvInstance(spec)
        sparse = EnvInstance(spec, delayed_reward=True)
        dense.reset(seed=5)
        sparse.reset(seed=5)
        rng = np.random.default_rng(0)
        actions = rng.uniform(-1, 1, size=(spec.horizon, 2))
        dense_rs, sparse_rs = [], []
        for a in actions:
            dense_rs.append(dense.step(a)[1])
            sparse_rs.append(sparse.step(a)[1])
        assert all(r == 0.0 for r in sparse_rs[:-1])
        assert sparse_rs[-1] == pytest.approx(sum(dense_rs))


class TestRewardRecomputation:
    """Rewards recomputed from (state', c) by independent formulas match."""

    @pytest.mark.parametrize("problem", PROBLEMS)
    def test_1000_random_transitions(self, problem):
        rng = np.random.default_rng(17)
        if problem == "grid_maze":
            specs = [spec_of(problem, cell) for cell in MAZE_EMPTY_CELLS[:4]]
        elif problem == "point_reach":
            specs = [spec_of(problem, [np.cos(a), np.sin(a)]) for a in rng.uniform(0, 7, 4)]
        else:
            specs = [spec_of(problem, [v]) for v in rng.uniform(0.1, 1.0, 4)]
        checked = 0
        while checked < 1000:
            spec = specs[int(rng.integers(len(specs)))]
            env = EnvInstance(spec)
            prev = env.reset(seed=int(rng.integers(1 << 30)))
            for _ in range(int(rng.integers(1, spec.horizon))):
                a = rng.uniform(-1, 1, spec.action_dim)
                nxt, r, done = env.step(a)
                if problem == "point_velocity":
                    expected = -abs(nxt[0] - spec.c[0])
                elif problem == "point_direction":
                    expected = nxt[2] * math.cos(spec.c[0]) + nxt[3] * math.sin(spec.c[0])
                elif problem == "point_reach":
                    expected = -math.sqrt((nxt[0] - spec.c[0]) ** 2 + (nxt[1] - spec.c[1]) ** 2)
                else:
                    expected = float(
                        math.sqrt((nxt[0] - spec.c[0]) ** 2 + (nxt[1] - spec.c[1]) ** 2) <= 0.5
                    )
                assert r == expected
                checked += 1
                if done:
                    break


class TestObservationBlindness:
    @pytest.mark.parametrize("problem", PROBLEMS)
    def test_observations_do_not_depend_on_c(self, problem):
        """Same seed and actions, different c: identical observations."""
        train, test = (
            make_split(problem, 21, 5) if problem == "grid_maze" else make_split(problem, 12, 4)
        )
        a_spec, b_spec = train[0], test[0]
        rng = np.random.default_rng(3)
        actions = rng.uniform(-1, 1, size=(PROBLEM_DIMS[problem][3], a_spec.action_dim))
        env_a, env_b = EnvInstance(a_spec), EnvInstance(b_spec)
        sa, sb = env_a.reset(seed=9), env_b.reset(seed=9)
        np.testing.assert_array_equal(sa, sb)
        for a in actions:
            na, _, _ = env_a.step(a)
            nb, _, _ = env_b.step(a)
            np.testing.assert_array_equal(na, nb)

    def test_state_dimension_has_no_room_for_c(self):
        for problem, (d_s, _, d_c, _) in PROBLEM_DIMS.items():
            train = (make_split(problem, 21, 5) if problem == "grid_maze" else make_split(problem, 12, 4))[0]
            env = EnvInstance(train[0])
            assert env.reset(seed=0).shape == (d_s,)


class TestExperts:
    def test_reach_expert_full_speed_toward_goal(self):
        spec = spec_of("point_reach", [1.0, 0.0])
        np.testing.assert_allclose(expert_action(spec, np.zeros(2)), [1.0, 0.0])

    def test_velocity_expert_idle_at_goal(self):
        spec = spec_of("point_velocity", [0.4])
        np.testing.assert_allclose(expert_action(spec, np.array([0.4])), [0.0])

    def test_reach_expert_hits_any_unit_goal(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            angle = rng.uniform(0, 2 * np.pi)
            spec = spec_of("point_reach", [np.cos(angle), np.sin(angle)])
            states, _, _ = rollout_policy(spec, lambda s: expert_action(spec, s), seed=int(rng.integers(1 << 30)))
            assert np.linalg.norm(states[-1] - spec.c) < 0.01

    def test_maze_rollouts_never_cross_walls(self):
        spec = spec_of("grid_maze", [6.0, 6.0], task_id=25)
        rng = np.random.default_rng(0)
        for policy in (lambda s: expert_action(spec, s), lambda s: rng.uniform(-1, 1, 2)):
            for seed in range(20):
                states, _, _ = rollout_policy(spec, policy, seed=seed)
                for st in states:
                    assert not maze_cell_blocked(maze_cell_of(st[0], st[1]))

    @pytest.mark.slow
    @pytest.mark.parametrize("problem", PROBLEMS)
    def test_expert_beats_random_by_five_sigma_everywhere(self, problem):
        """Expert mean exceeds the random mean by >= 5 standard errors of
        the 100-episode random estimate, on every task."""
        train, test = (
            make_split(problem, 21, 5) if problem == "grid_maze" else make_split(problem, 12, 4)
        )
        n = 100
        for spec in train + test:
            b = estimate_baselines(spec, n_episodes=n, seed=1)
            margin = b["expert_return"] - b["random_return"]
            sem = b["random_return_std"] / np.sqrt(n)
            assert margin >= 5.0 * sem, (
                f"{problem} task {spec.task_id}: expert {b['expert_return']:.2f} "
                f"random {b['random_return']:.2f} sem {sem:.3f}"
            )


class TestSplits:
    def test_maze_split_matches_published_cells(self):
        train, test = make_split("grid_maze", 21, 5)
        assert len(train) == 21 and len(test) == 5
        assert [t.task_id for t in test] == MAZE_TEST_IDS
        got = {tuple(int(v) for v in t.c) for t in test}
        assert got == {(1, 2), (2, 4), (3, 3), (4, 1), (6, 6)}
        assert {tuple(int(v) for v in t.c) for t in train} | got == set(MAZE_EMPTY_CELLS)

    def test_maze_rejects_other_sizes(self):
        with pytest.raises(ContractError):
            make_split("grid_maze", 10, 5)
        with pytest.raises(ContractError):
            make_split("grid_maze", 30, 10)

    def test_point_reach_split_disjoint_and_interleaved(self):
        train, test = make_split("point_reach", 12, 4)
        assert len(train) == 12 and len(test) == 4
        train_angles = sorted(np.arctan2(t.c[1], t.c[0]) % (2 * np.pi) for t in train)
        for spec in test:
            angle = np.arctan2(spec.c[1], spec.c[0]) % (2 * np.pi)
            assert all(not np.isclose(angle, a) for a in train_angles)
            # strictly inside some gap between adjacent training angles
            assert any(lo < angle < hi for lo, hi in zip(train_angles, train_angles[1:]))

    def test_velocity_test_goals_strictly_inside_train_range(self):
        train, test = make_split("point_velocity", 12, 4)
        train_vs = sorted(t.c[0] for t in train)
        for spec in test:
            below = max(v for v in train_vs if v < spec.c[0])
            above = min(v for v in train_vs if v > spec.c[0])
            assert below < spec.c[0] < above

    def test_same_seed_same_split(self):
        a = make_split("point_reach", 12, 4, seed=7)
        b = make_split("point_reach", 12, 4, seed=7)
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            assert x.task_id == y.task_id
            np.testing.assert_array_equal(x.c, y.c)
