"""Adam with decoupled weight decay and linear learning-rate warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore
from .tensor import ContractError


@dataclass
class AdamState:
    """Optimizer state shared across all parameters of a store."""

    base_lr: float = 1e-4
    warmup_steps: int = 1000
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def effective_lr(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        return self.base_lr * min(1.0, s / self.warmup_steps)


def adam_step(store: ParamStore, opt: AdamState):
    """One in-place update of every parameter in the store.

    Weight decay is decoupled (applied directly to parameters, not mixed
    into the moment estimates). Grads are cleared afterward.
    """
    for name, p in store.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no grad; run backward first")

    opt.step += 1
    lr = opt.effective_lr()
    b1, b2 = opt.beta1, opt.beta2
    bias1 = 1.0 - b1 ** opt.step
    bias2 = 1.0 - b2 ** opt.step

    for name, p in store.items():
        g = p.grad.reshape(p.data.shape).astype(np.float64, copy=False)
        if name not in opt.m:
            opt.m[name] = np.zeros(p.data.shape, dtype=np.float64)
            opt.v[name] = np.zeros(p.data.shape, dtype=np.float64)
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + opt.eps)
        if opt.weight_decay:
            update = update + opt.weight_decay * p.data.astype(np.float64, copy=False)
        p.data -= (lr * update).astype(p.data.dtype)
        p.grad = None
