"""Autodiff engine tests: frozen values, error contracts, and a central
finite-difference oracle over every op kind."""

import numpy as np
import pytest

from minidt import tensor as T
from minidt.params import ParamStore
from minidt.tensor import (
    ContractError,
    ParameterError,
    ShapeError,
    StateError,
    Tensor,
    backward,
    forward_op,
)


def fd_check_graph(build_loss, store, probes=3, step=1e-5, seed=0):
    """Max relative error between analytic grads and central differences
    over a few random parameter entries."""
    rng = np.random.default_rng(seed)
    loss = build_loss()
    backward(loss, store)
    analytic = {name: p.grad.copy() for name, p in store.items()}
    store.zero_grads()
    worst = 0.0
    with T.no_grad():
        for name, p in store.items():
            flat = p.data.reshape(-1)
            for idx in rng.integers(0, flat.size, size=min(probes, flat.size)):
                orig = flat[idx]
                flat[idx] = orig + step
                f_plus = float(build_loss().data[0])
                flat[idx] = orig - step
                f_minus = float(build_loss().data[0])
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                a = float(analytic[name].reshape(-1)[idx])
                worst = max(worst, abs(a - numeric) / max(1e-12, abs(a) + abs(numeric)))
    T.clear_tape()
    return worst


class TestForwardValues:
    def test_softmax_uniform(self):
        out = forward_op("softmax_lastdim", [Tensor([1.0, 1.0, 1.0])])
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 7, 5)))
        out = forward_op("softmax_lastdim", [x])
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones((4, 7)), atol=1e-6)

    def test_layer_norm_reference(self):
        # (x - mean) / sqrt(population variance): frozen from a high-precision
        # computation with x = [1, 2, 3], gain 1, bias 0, eps 0
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3), dtype=np.float64)
        g = Tensor(np.ones(3), dtype=np.float64)
        b = Tensor(np.zeros(3), dtype=np.float64)
        out = forward_op("layer_norm", [x, g, b], {"eps": 0.0})
        np.testing.assert_allclose(out.data[0], [-1.2247448713915890, 0.0, 1.2247448713915890], atol=1e-12)

    def test_layer_norm_zero_mean(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(6, 16)).astype(np.float32))
        g = Tensor(np.full(16, 1.7, dtype=np.float32))
        b = Tensor(np.zeros(16, dtype=np.float32))
        out = forward_op("layer_norm", [x, g, b])
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-6

    def test_relu(self):
        out = forward_op("relu", [Tensor([-1.0, 0.0, 2.0])])
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_interleave_reshape_layout(self):
        r = Tensor(np.full((1, 2, 3), 1.0))
        s = Tensor(np.full((1, 2, 3), 2.0))
        a = Tensor(np.full((1, 2, 3), 3.0))
        packed = forward_op("concat", [r, s, a], {"axis": 2})
        seq = forward_op("reshape", [packed], {"shape": (1, 6, 3)})
        np.testing.assert_array_equal(seq.data[0, :, 0], [1, 2, 3, 1, 2, 3])

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 4)) * 50)
        for op in ("relu", "softmax_lastdim"):
            assert np.isfinite(forward_op(op, [x]).data).all()


class TestErrors:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError, match="inner dims"):
            forward_op("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward_op("add", [Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))])

    def test_dropout_bad_probability(self):
        rng = np.random.default_rng(0)
        for p in (-0.1, 1.0, 1.5):
            with pytest.raises(ParameterError):
                forward_op("dropout", [Tensor(np.ones(4))], {"p": p, "rng": rng})

    def test_unknown_op(self):
        with pytest.raises(ParameterError, match="unknown op_kind"):
            forward_op("conv2d", [Tensor(np.ones(2))])

    def test_backward_needs_scalar(self):
        w = Tensor(np.ones(3), requires_grad=True)
        out = T.relu(w)
        with pytest.raises(ContractError, match="shape"):
            backward(out)

    def test_backward_twice_is_a_state_error(self):
        w = Tensor(np.ones(3), requires_grad=True)
        loss = T.mean_squared_error(w, Tensor(np.zeros(3)))
        backward(loss)
        with pytest.raises(StateError):
            backward(loss)


class TestBackwardValues:
    def test_mse_quadratic_gradient(self):
        # loss = w^2 with w = [2]  ->  dloss/dw = [4]
        w = Tensor(np.array([2.0]), requires_grad=True)
        loss = T.mean_squared_error(w, Tensor(np.array([0.0])))
        backward(loss)
        np.testing.assert_allclose(w.grad, [4.0])

    def test_unreachable_parameter_gets_zero_grad(self):
        store = ParamStore()
        w = store.add("w", Tensor(np.array([2.0]), requires_grad=True))
        q = store.add("unused", Tensor(np.ones((3, 2)), requires_grad=True))
        loss = T.mean_squared_error(w, Tensor(np.array([0.0])))
        backward(loss, store)
        np.testing.assert_array_equal(q.grad, np.zeros((3, 2)))

    def test_gradient_accumulates_across_fanout(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        doubled = T.add(w, w)
        loss = T.mean_squared_error(doubled, Tensor(np.array([0.0])))
        backward(loss)
        np.testing.assert_allclose(w.grad, [24.0])  # d/dw (2w)^2 = 8w

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 8)).astype(np.float32)
        wdata = rng.normal(size=(8, 4)).astype(np.float32)

        def run():
            w = Tensor(wdata.copy(), requires_grad=True)
            drop_rng = np.random.default_rng(42)
            out = T.dropout(T.matmul(Tensor(x), w), 0.3, drop_rng, train=True)
            loss = T.mean_squared_error(out, Tensor(np.zeros(out.shape, dtype=np.float32)))
            backward(loss)
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


def _random_case(op_kind, rng):
    """Build (store, loss_fn) exercising one op on random shapes/inputs."""
    store = ParamStore()

    def param(shape, offset=0.0):
        return store.add(f"p{len(store.names())}", Tensor(rng.normal(size=shape) + offset, requires_grad=True, dtype=np.float64))

    def loss_of(out):
        tgt = Tensor(rng.normal(size=out.shape), dtype=np.float64)
        return lambda o: T.mean_squared_error(o, tgt)

    if op_kind == "matmul":
        m, k, n = rng.integers(1, 5, size=3)
        a, b = param((m, k)), param((k, n))
        fn = lambda: T.matmul(a, b)
    elif op_kind == "matmul_stacked":
        bsz, m, k, n = rng.integers(1, 4, size=4)
        a, b = param((bsz, m, k)), param((bsz, k, n))
        fn = lambda: T.matmul(a, b)
    elif op_kind == "add":
        shape = tuple(rng.integers(1, 5, size=2))
        a, b = param(shape), param(shape)
        fn = lambda: T.add(a, b)
    elif op_kind == "add_bias":
        m, n = rng.integers(1, 5, size=2)
        a, b = param((m, n)), param((n,))
        fn = lambda: T.add(a, b)
    elif op_kind == "mul_scalar":
        a = param(tuple(rng.integers(1, 5, size=2)))
        s = float(rng.normal())
        fn = lambda: T.mul_scalar(a, s)
    elif op_kind == "concat":
        n = int(rng.integers(2, 4))
        cols = int(rng.integers(1, 4))
        parts = [param((int(rng.integers(1, 4)), cols)) for _ in range(n)]
        fn = lambda: T.concat(parts, axis=0)
    elif op_kind == "slice":
        m = int(rng.integers(4, 8))
        a = param((m, 3))
        start, step = int(rng.integers(0, 2)), int(rng.integers(1, 3))
        fn = lambda: T.slice_axis(a, 0, start, m, step)
    elif op_kind == "reshape":
        a = param((2, 3, 4))
        fn = lambda: T.reshape(a, (6, 4))
    elif op_kind == "embedding_lookup":
        v, h = int(rng.integers(3, 7)), int(rng.integers(2, 5))
        tab = param((v, h))
        idx = rng.integers(0, v, size=(2, 3))
        fn = lambda: T.embedding_lookup(tab, idx)
    elif op_kind == "layer_norm":
        m, h = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        x, g, b = param((m, h)), param((h,), offset=1.0), param((h,))
        fn = lambda: T.layer_norm(x, g, b)
    elif op_kind == "softmax_lastdim":
        a = param(tuple(rng.integers(2, 5, size=2)))
        fn = lambda: T.softmax_lastdim(a)
    elif op_kind == "relu":
        a = param(tuple(rng.integers(2, 5, size=2)), offset=0.0)
        a.data[np.abs(a.data) < 1e-2] += 0.05  # keep probes away from the kink
        fn = lambda: T.relu(a)
    elif op_kind == "dropout":
        a = param((4, 5))
        fn = lambda: T.dropout(a, 0.4, np.random.default_rng(7), train=True)
    elif op_kind == "masked_fill":
        shape = (3, 4)
        a = param(shape)
        mask = rng.random(shape) < 0.3
        fn = lambda: T.masked_fill(a, mask, -5.0)
    elif op_kind == "transpose_last2":
        a = param((2, 3, 4))
        fn = lambda: T.transpose_last2(a)
    elif op_kind == "sum":
        a = param((3, 4))
        fn = lambda: T.sum_all(a)
    elif op_kind == "mean_squared_error":
        shape = (3, 2)
        a, b = param(shape), param(shape)
        return store, lambda: T.mean_squared_error(a, b)
    else:
        raise AssertionError(op_kind)
    raw = fn
    wrap = loss_of(raw())
    T.clear_tape()
    return store, lambda: wrap(raw())


ALL_OP_CASES = [
    "matmul", "matmul_stacked", "add", "add_bias", "mul_scalar", "concat", "slice",
    "reshape", "embedding_lookup", "layer_norm", "softmax_lastdim", "relu",
    "dropout", "masked_fill", "transpose_last2", "sum", "mean_squared_error",
]


@pytest.mark.parametrize("op_kind", ALL_OP_CASES)
def test_tape_completeness_against_finite_differences(op_kind):
    """Every op's analytic gradient matches central differences (1e-4,
    double precision, step 1e-5) over 100 random shapes/inputs."""
    rng = np.random.default_rng(hash(op_kind) % 2**32)
    worst = 0.0
    for case in range(100):
        store, loss_fn = _random_case(op_kind, rng)
        worst = max(worst, fd_check_graph(loss_fn, store, probes=2, seed=case))
    assert worst < 1e-4, f"{op_kind}: max relative error {worst}"
