"""Central finite-difference oracle for the autodiff engine.

The oracle's accuracy floor is set by relu-kink proximity: a probe whose
interval [p-h, p+h] moves some pre-activation across zero picks up O(h)
truncation error. The end-to-end check therefore evaluates at a fixed,
well-conditioned point (default seed) rather than regenerating random
inputs per run.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import NumericError


def finite_difference_check(
    model_loss_fn,
    store: ParamStore,
    n_probes: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    ``model_loss_fn`` must be a deterministic zero-argument callable that
    builds a fresh forward pass over the store's parameters and returns the
    scalar loss tensor. Probes are spread over every parameter (at least one
    entry each, the rest sampled at random), so no tensor escapes coverage.
    Returns the maximum relative error
    ``|analytic - numeric| / max(1e-12, |analytic| + |numeric|)``.
    """
    rng = np.random.default_rng(seed)

    loss = model_loss_fn()
    if not np.isfinite(loss.data[0]):
        raise NumericError("loss is non-finite at the evaluation point")
    T.backward(loss, store)
    analytic = {name: p.grad.copy() for name, p in store.items()}
    store.zero_grads()

    names = store.names()
    probes: list[tuple[str, int]] = []
    for name in names:
        n = store[name].numel()
        probes.append((name, int(rng.integers(0, n))))
    while len(probes) < n_probes:
        name = names[int(rng.integers(0, len(names)))]
        probes.append((name, int(rng.integers(0, store[name].numel()))))

    max_rel = 0.0
    with T.no_grad():
        for name, flat_idx in probes[:max(n_probes, len(names))]:
            p = store[name]
            flat = p.data.reshape(-1)
            orig = flat[flat_idx]
            flat[flat_idx] = orig + step
            f_plus = float(model_loss_fn().data[0])
            flat[flat_idx] = orig - step
            f_minus = float(model_loss_fn().data[0])
            flat[flat_idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while probing {name!r}")
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[flat_idx])
            rel = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            max_rel = max(max_rel, rel)
    T.clear_tape()
    return max_rel


def build_end_to_end_check(seed: int = 0, n_layers: int = 2, embed_dim: int = 16,
                           context_len: int = 4, learned_len: int = 3):
    """Tiny double-precision conditioned model plus a deterministic loss
    closure over a fixed random batch, for end-to-end gradient checking."""
    from .model import Batch, ModelConfig, bc_loss, embed_batch, forward, init_model_params
    from .prompts import PromptVariant

    cfg = ModelConfig(
        context_len=context_len, n_layers=n_layers, n_heads=1, embed_dim=embed_dim,
        dropout=0.0, state_dim=2, action_dim=2, param_dim=2, max_timestep=4 * context_len,
    )
    variant = PromptVariant("task_learned", learned_len)
    params = init_model_params(cfg, variant, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    B, K = 2, context_len
    rtg = rng.normal(size=(B, K))
    states = rng.normal(size=(B, K, 2))
    actions = rng.uniform(-1, 1, size=(B, K, 2))
    timesteps = np.tile(np.arange(K), (B, 1))
    mask = np.ones((B, K), dtype=bool)
    mask[0, 0] = False
    rtg[0, 0] = states[0, 0] = actions[0, 0] = 0
    batch = Batch(rtg, states, actions, timesteps, mask, c=rng.normal(size=(B, 2)))
    target = batch.actions + 0.3

    def loss_fn():
        pred = forward(embed_batch(batch, variant, cfg, params), cfg, params, train_mode=False)
        return bc_loss(pred, target, batch.loss_mask)

    return params, loss_fn
