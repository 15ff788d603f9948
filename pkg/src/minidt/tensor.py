"""Dense tensors with reverse-mode automatic differentiation.

Everything is flat row-major numpy storage under the hood. Operations are
recorded on a global tape; ``backward`` replays the tape in reverse and
accumulates gradients into every ``requires_grad`` tensor it reaches, then
clears the tape. Training runs in float32; float64 is supported for
gradient checking.

Supported op kinds (see ``forward_op``): matmul, add, mul_scalar, concat,
slice, reshape, embedding_lookup, layer_norm, softmax_lastdim, relu,
dropout, masked_fill, transpose_last2, sum, mean_squared_error.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to the op's shape rule."""


class ParameterError(ValueError):
    """An op attribute is outside its valid range."""


class ContractError(ValueError):
    """A caller violated an API precondition."""


class StateError(RuntimeError):
    """The tape is not in a state where the request makes sense."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite math was expected."""


class Tensor:
    """N-dimensional array of reals with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self):
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def numel(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded op: output tensor plus a closure producing input grads."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tape: list[_Node] = []
_grad_enabled: bool = True
_allocator_tuned = False


def enable_fast_allocator():
    """Keep large freed blocks in the heap instead of returning them to the
    OS (glibc mmap/trim thresholds). The training loop allocates and frees
    the same activation shapes every step; without this, every step pays
    mmap/munmap and page-fault costs. No-op off glibc."""
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


@contextmanager
def no_grad():
    """Disable taping inside the block (used for evaluation rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def tape_size() -> int:
    return len(_tape)


def clear_tape():
    _tape.clear()


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.append(_Node(tuple(inputs), out, backward_fn))
    else:
        out.requires_grad = False
    return out


def _check_same_dtype(*tensors: Tensor):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} and {t.data.dtype}; build the whole graph in one precision")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b. Either both stacked with matching leading dims, or b is a 2-D
    weight applied to the last axis of a."""
    _check_same_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if b.data.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[1])

        def backward_fn(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record([a, b], out, backward_fn)

    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"stacked matmul shapes differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2)) if a.requires_grad else None
        gb = np.matmul(a.data.swapaxes(-1, -2), g) if b.requires_grad else None
        return ga, gb

    return _record([a, b], out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a 1-D bias broadcast over the last axis."""
    _check_same_dtype(a, b)
    bias = b.data.ndim == 1 and a.data.ndim > 1
    if bias:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"bias add: last dim {a.shape[-1]} != bias len {b.shape[0]}")
    elif a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        ga = g if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if bias else g
        return ga, gb

    return _record([a, b], out, backward_fn)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = a.data * s

    def backward_fn(g):
        return (g * s if a.requires_grad else None,)

    return _record([a], out, backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    _check_same_dtype(*tensors)
    for t in tensors[1:]:
        if t.data.ndim != tensors[0].data.ndim:
            raise ShapeError("concat inputs must share ndim")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        gs = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offsets[i], offsets[i + 1])
                gs.append(np.ascontiguousarray(g[tuple(idx)]))
            else:
                gs.append(None)
        return gs

    return _record(list(tensors), out, backward_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    """Basic strided slice along one axis."""
    if not (0 <= axis < a.data.ndim):
        raise ShapeError(f"slice axis {axis} out of range for shape {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop, step)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def backward_fn(g):
        if not a.requires_grad:
            return (None,)
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _record([a], out, backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    """Reinterpret the flat row-major buffer under a new shape (no data movement)."""
    out = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape) if a.requires_grad else None,)

    return _record([a], out, backward_fn)


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError("transpose_last2 needs ndim >= 2")
    out = np.ascontiguousarray(a.data.swapaxes(-1, -2))

    def backward_fn(g):
        return (np.ascontiguousarray(g.swapaxes(-1, -2)) if a.requires_grad else None,)

    return _record([a], out, backward_fn)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Row gather: out[..., :] = table[indices[...], :]."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_lookup indices must be integers")
    if table.data.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def backward_fn(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record([table], out, backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    _check_same_dtype(x, gain, bias)
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({h},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mean
    var = np.einsum("...h,...h->...", xhat, xhat)[..., None] / x.data.dtype.type(h)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    np.multiply(xhat, inv_std, out=xhat)
    out = xhat * gain.data
    out += bias.data

    def backward_fn(g):
        gxhat = g * gain.data
        gx = None
        if x.requires_grad:
            # d/dx of (x - mean) * inv_std, with mean and var both functions of x
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = np.einsum("...h,...h->...", gxhat, xhat)[..., None] / x.data.dtype.type(h)
            gx = gxhat
            gx -= m1
            gx -= xhat * m2
            gx *= inv_std
        g2 = g.reshape(-1, h)
        ggain = np.einsum("bh,bh->h", g2, xhat.reshape(-1, h)) if gain.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _record([x, gain, bias], out, backward_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record([x], p, backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        return (g * (out > 0) if x.requires_grad else None,)

    return _record([x], out, backward_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-p) at train time,
    identity at eval time."""
    if not (0.0 <= p < 1.0):
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    # single fused mask holding 0 or 1/(1-p)
    mask = (rng.random(x.shape, dtype=np.float32) >= np.float32(p)).astype(x.data.dtype)
    mask *= x.data.dtype.type(1.0 / (1.0 - p))
    out = x.data * mask

    def backward_fn(g):
        return (g * mask if x.requires_grad else None,)

    return _record([x], out, backward_fn)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Where mask is True, replace with a constant (gradient blocked there)."""
    m = np.asarray(mask, dtype=bool)
    m_b = np.broadcast_to(m, x.shape)
    out = np.where(m_b, x.data.dtype.type(value), x.data)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.where(m_b, x.data.dtype.type(0), g),)

    return _record([x], out, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a shape-[1] tensor."""
    out = x.data.sum(dtype=x.data.dtype).reshape(1)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.full(x.shape, g[0], dtype=x.data.dtype),)

    return _record([x], out, backward_fn)


def mean_squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all entries of (pred - target)^2, as a shape-[1] tensor."""
    _check_same_dtype(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.array([np.mean(diff * diff)], dtype=pred.data.dtype)

    def backward_fn(g):
        scale = g[0] * pred.data.dtype.type(2.0 / n)
        gp = diff * scale if pred.requires_grad else None
        gt = -diff * scale if target.requires_grad else None
        return gp, gt

    return _record([pred, target], out, backward_fn)


# ---------------------------------------------------------------------------
# generic dispatch + backward

_OPS = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "mul_scalar": lambda inputs, attrs: mul_scalar(inputs[0], attrs["scalar"]),
    "concat": lambda inputs, attrs: concat(inputs, attrs["axis"]),
    "slice": lambda inputs, attrs: slice_axis(
        inputs[0], attrs["axis"], attrs["start"], attrs["stop"], attrs.get("step", 1)
    ),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "embedding_lookup": lambda inputs, attrs: embedding_lookup(inputs[0], attrs["indices"]),
    "layer_norm": lambda inputs, attrs: layer_norm(*inputs, eps=attrs.get("eps", 1e-5)),
    "softmax_lastdim": lambda inputs, attrs: softmax_lastdim(inputs[0]),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "dropout": lambda inputs, attrs: dropout(
        inputs[0], attrs["p"], attrs["rng"], attrs.get("train", True)
    ),
    "masked_fill": lambda inputs, attrs: masked_fill(inputs[0], attrs["mask"], attrs["value"]),
    "transpose_last2": lambda inputs, attrs: transpose_last2(inputs[0]),
    "sum": lambda inputs, attrs: sum_all(inputs[0]),
    "mean_squared_error": lambda inputs, attrs: mean_squared_error(*inputs),
}


def forward_op(op_kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Uniform entry point over the supported op set."""
    if op_kind not in _OPS:
        raise ParameterError(f"unknown op_kind {op_kind!r}; supported: {sorted(_OPS)}")
    return _OPS[op_kind](list(inputs), attrs or {})


def backward(scalar_loss: Tensor, store=None):
    """Populate grads of every requires_grad tensor reachable from the loss.

    Parameters registered in ``store`` (when given) that the loss does not
    reach are assigned zero grads, so optimizers can rely on grad being
    present for every tracked parameter. The tape is consumed and cleared.
    """
    if scalar_loss.shape != (1,):
        raise ContractError(f"backward needs a shape-[1] loss, got {scalar_loss.shape}")
    if not _tape:
        raise StateError("backward called on an empty tape; run a fresh forward pass first")
    if not np.isfinite(scalar_loss.data[0]):
        raise NumericError(f"loss is non-finite: {scalar_loss.data[0]}")

    grads: dict[int, np.ndarray] = {id(scalar_loss): np.ones(1, dtype=scalar_loss.data.dtype)}
    for node in reversed(_tape):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                # out-of-place: backward_fns may return views or the same
                # array for several operands, so stored grads are never
                # safe to mutate
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever remains in the dict belongs to leaves (tensors no node produced)
    seen: set[int] = set()
    for node in _tape:
        for t in node.inputs:
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                g = grads.get(id(t))
                if g is not None:
                    t.grad = g
    if store is not None:
        for name, p in store.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    _tape.clear()
