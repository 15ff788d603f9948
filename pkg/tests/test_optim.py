"""Adam + warmup behavior and the finite-difference oracle helper."""

import numpy as np
import pytest

from minidt import tensor as T
from minidt.gradcheck import finite_difference_check
from minidt.optim import AdamState, adam_step
from minidt.params import ParamStore
from minidt.tensor import ContractError, Tensor


def make_store(values):
    store = ParamStore()
    for name, v in values.items():
        store.add(name, Tensor(np.asarray(v, dtype=np.float64), requires_grad=True))
    return store


class TestAdam:
    def test_zero_grad_zero_decay_leaves_parameters(self):
        store = make_store({"w": [1.0, -2.0, 3.0]})
        store["w"].grad = np.zeros(3)
        opt = AdamState(base_lr=1e-2, warmup_steps=1, weight_decay=0.0)
        adam_step(store, opt)
        np.testing.assert_array_equal(store["w"].data, [1.0, -2.0, 3.0])
        assert opt.step == 1

    def test_first_post_warmup_step_is_lr_times_sign(self):
        for g in (0.7, -3.0):
            store = make_store({"w": [1.0]})
            store["w"].grad = np.array([g])
            opt = AdamState(base_lr=1e-3, warmup_steps=1, weight_decay=0.0, eps=1e-12)
            adam_step(store, opt)
            np.testing.assert_allclose(store["w"].data, [1.0 - 1e-3 * np.sign(g)], rtol=1e-6)

    def test_warmup_midpoint_halves_lr(self):
        opt = AdamState(base_lr=2e-3, warmup_steps=100)
        assert opt.effective_lr(step=50) == pytest.approx(1e-3)

    def test_warmup_monotone_then_constant(self):
        opt = AdamState(base_lr=1e-3, warmup_steps=20)
        lrs = [opt.effective_lr(step=s) for s in range(1, 41)]
        assert all(b >= a for a, b in zip(lrs, lrs[1:]))
        assert all(lr == pytest.approx(1e-3) for lr in lrs[20:])

    def test_missing_grad_is_a_contract_error(self):
        store = make_store({"w": [1.0], "v": [2.0]})
        store["w"].grad = np.array([1.0])
        with pytest.raises(ContractError, match="no grad"):
            adam_step(store, AdamState())

    def test_grads_cleared_and_step_counts(self):
        store = make_store({"w": [1.0]})
        opt = AdamState(base_lr=1e-3, warmup_steps=1)
        for expected_step in (1, 2, 3):
            store["w"].grad = np.array([0.5])
            adam_step(store, opt)
            assert store["w"].grad is None
            assert opt.step == expected_step

    def test_decoupled_weight_decay_shrinks_parameters(self):
        store = make_store({"w": [10.0]})
        store["w"].grad = np.array([0.0])
        opt = AdamState(base_lr=0.1, warmup_steps=1, weight_decay=0.5)
        adam_step(store, opt)
        np.testing.assert_allclose(store["w"].data, [10.0 - 0.1 * 0.5 * 10.0])


class TestFiniteDifferenceCheck:
    def test_linear_model_is_exact(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(8, 4)), dtype=np.float64)
        y = Tensor(rng.normal(size=(8, 2)), dtype=np.float64)
        store = make_store({"w": rng.normal(size=(4, 2))})

        def loss_fn():
            return T.mean_squared_error(T.matmul(x, store["w"]), y)

        assert finite_difference_check(loss_fn, store, n_probes=8, step=1e-5) < 1e-8

    def test_constant_loss_has_zero_error(self):
        store = make_store({"w": [1.0, 2.0]})
        const = Tensor(np.array([3.0]), dtype=np.float64)

        def loss_fn():
            # touches w so the parameter is on the tape, but cancels exactly
            zero = T.mul_scalar(store["w"], 0.0)
            return T.add(T.sum_all(zero), const)

        assert finite_difference_check(loss_fn, store, n_probes=4) == 0.0

    def test_every_parameter_probed_at_least_once(self):
        rng = np.random.default_rng(1)
        store = make_store({f"p{i}": rng.normal(size=(3,)) for i in range(5)})

        def loss_fn():
            total = T.sum_all(store["p0"])
            for i in range(1, 5):
                total = T.add(total, T.sum_all(T.mul_scalar(store[f"p{i}"], float(i))))
            return T.mean_squared_error(total, Tensor(np.zeros(1), dtype=np.float64))

        # n_probes below the parameter count still covers every tensor
        assert finite_difference_check(loss_fn, store, n_probes=2) < 1e-8
