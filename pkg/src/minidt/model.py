"""Causal transformer over (returns-to-go, state, action) token triples
with an optional conditioning prefix.

Layout of one sequence (interleaved prompt order, learned block length n):

    [z1 (n), c, z2 (n), c, z3 (n), c,  R0, s0, a0,  R1, s1, a1, ...]

Trajectory-prompt variants replace the prefix with embedded demonstration
steps; the plain variant has no prefix. Action predictions are read from
the hidden state at each state-token position, which is the last token
visible before the action it predicts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Segment
from .params import ParamStore
from .prompts import AssembledPrompt, PromptVariant, init_learned_prompt
from .tensor import ContractError, NumericError, ShapeError, Tensor

INIT_STD = 0.02
NEG_FILL = -1e9


@dataclass
class ModelConfig:
    context_len: int = 20
    n_layers: int = 3
    n_heads: int = 1
    embed_dim: int = 64
    dropout: float = 0.1
    state_dim: int = 2
    action_dim: int = 2
    param_dim: int = 2
    max_timestep: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by {self.n_heads} heads")
        if self.context_len < 1:
            raise ContractError("context_len must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ContractError("dropout must be in [0, 1)")


@dataclass
class TokenSequence:
    """Embedded batch plus the bookkeeping the attention mask needs."""

    embeddings: Tensor  # [B, L, h]
    token_valid: np.ndarray  # [B, L] bool, False on padding
    prompt_len: int
    step_index: np.ndarray  # [B, L] int, -1 on prompt positions
    token_role: list  # length L: prompt_z | prompt_c | prompt_traj | rtg | state | action
    loss_mask: np.ndarray  # [B, K] bool


def init_model_params(
    config: ModelConfig, variant: PromptVariant, seed: int, dtype=np.float32
) -> ParamStore:
    """Fresh parameter store for one model. Weights are N(0, 0.02), norms
    start at identity, and the learned prompt blocks (when the variant has
    any) are drawn last so variants that share the rest of the architecture
    get bit-identical seeds."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    h = config.embed_dim

    def w(name, shape):
        store.add(name, Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(dtype), requires_grad=True))

    def zeros(name, shape):
        store.add(name, Tensor(np.zeros(shape, dtype=dtype), requires_grad=True))

    def ones(name, shape):
        store.add(name, Tensor(np.ones(shape, dtype=dtype), requires_grad=True))

    w("embed_rtg_w", (1, h)); zeros("embed_rtg_b", (h,))
    w("embed_state_w", (config.state_dim, h)); zeros("embed_state_b", (h,))
    w("embed_action_w", (config.action_dim, h)); zeros("embed_action_b", (h,))
    if variant.uses_c:
        w("embed_param_w", (config.param_dim, h)); zeros("embed_param_b", (h,))
    w("embed_timestep", (config.max_timestep, h))
    if (variant.uses_c or variant.uses_z) and variant.prompt_len() > 0:
        w("embed_prompt_pos", (variant.prompt_len(), h))
    ones("embed_ln_g", (h,)); zeros("embed_ln_b", (h,))
    for i in range(config.n_layers):
        ones(f"layer{i}_ln1_g", (h,)); zeros(f"layer{i}_ln1_b", (h,))
        w(f"layer{i}_attn_qkv_w", (h, 3 * h)); zeros(f"layer{i}_attn_qkv_b", (3 * h,))
        w(f"layer{i}_attn_proj_w", (h, h)); zeros(f"layer{i}_attn_proj_b", (h,))
        ones(f"layer{i}_ln2_g", (h,)); zeros(f"layer{i}_ln2_b", (h,))
        w(f"layer{i}_mlp_fc_w", (h, 4 * h)); zeros(f"layer{i}_mlp_fc_b", (4 * h,))
        w(f"layer{i}_mlp_proj_w", (4 * h, h)); zeros(f"layer{i}_mlp_proj_b", (h,))
    ones("final_ln_g", (h,)); zeros("final_ln_b", (h,))
    w("action_head_w", (h, config.action_dim)); zeros("action_head_b", (config.action_dim,))
    if variant.uses_z:
        init_learned_prompt(variant.learned_len, h, rng, store)
    return store


@dataclass
class Batch:
    """Raw model inputs for B segments of the same task split."""

    rtg: np.ndarray  # [B, K]
    states: np.ndarray  # [B, K, d_s]
    actions: np.ndarray  # [B, K, d_a]
    timesteps: np.ndarray  # [B, K] int
    loss_mask: np.ndarray  # [B, K] bool
    c: Optional[np.ndarray] = None  # [B, d_c]
    prompt_rtg: Optional[np.ndarray] = None  # [B, P]
    prompt_states: Optional[np.ndarray] = None  # [B, P, d_s]
    prompt_actions: Optional[np.ndarray] = None  # [B, P, d_a]
    prompt_timesteps: Optional[np.ndarray] = None  # [B, P] int

    @classmethod
    def from_segments(cls, segments: list[Segment], prompts: list[AssembledPrompt]) -> "Batch":
        return cls.from_segments_arrays(
            np.stack([s.rtg for s in segments]).astype(np.float64),
            np.stack([s.states for s in segments]),
            np.stack([s.actions for s in segments]),
            np.stack([s.timesteps for s in segments]),
            np.stack([s.loss_mask for s in segments]),
            prompts,
        )

    @classmethod
    def from_segments_arrays(cls, rtg, states, actions, timesteps, loss_mask, prompts) -> "Batch":
        if rtg.shape[0] != len(prompts):
            raise ContractError("one prompt per segment required")
        b = cls(rtg=rtg, states=states, actions=actions, timesteps=timesteps, loss_mask=loss_mask)
        variant = prompts[0].variant
        if variant.uses_c:
            b.c = np.stack([p.c for p in prompts])
        if variant.uses_trajectory:
            b.prompt_rtg = np.stack([p.traj.rtg for p in prompts])
            b.prompt_states = np.stack([p.traj.states for p in prompts])
            b.prompt_actions = np.stack([p.traj.actions for p in prompts])
            b.prompt_timesteps = np.stack([p.traj.timesteps for p in prompts])
        return b


def _interleave_triples(r_tok: Tensor, s_tok: Tensor, a_tok: Tensor) -> Tensor:
    """[B,K,h] x3 -> [B,3K,h] ordered (r_0, s_0, a_0, r_1, ...). Concat on
    the channel axis then reshape; the flat row-major layout is identical."""
    B, K, h = r_tok.shape
    packed = T.concat([r_tok, s_tok, a_tok], axis=2)
    return T.reshape(packed, (B, 3 * K, h))


def _embed_triples(rtg, states, actions, timesteps, config: ModelConfig, params: ParamStore) -> Tensor:
    dtype = params["embed_rtg_w"].dtype
    B, K = rtg.shape
    r_in = Tensor(rtg.reshape(B, K, 1).astype(dtype))
    s_in = Tensor(states.astype(dtype))
    a_in = Tensor(actions.astype(dtype))
    r_tok = T.add(T.matmul(r_in, params["embed_rtg_w"]), params["embed_rtg_b"])
    s_tok = T.add(T.matmul(s_in, params["embed_state_w"]), params["embed_state_b"])
    a_tok = T.add(T.matmul(a_in, params["embed_action_w"]), params["embed_action_b"])
    te = T.embedding_lookup(params["embed_timestep"], timesteps)
    r_tok = T.add(r_tok, te)
    s_tok = T.add(s_tok, te)
    a_tok = T.add(a_tok, te)
    return _interleave_triples(r_tok, s_tok, a_tok)


def embed_batch(
    batch: Batch, variant: PromptVariant, config: ModelConfig, params: ParamStore
) -> TokenSequence:
    """Embed a batch into the full token sequence: prefix first, then the
    interleaved trajectory triples."""
    B, K = batch.rtg.shape
    if K != config.context_len:
        raise ContractError(f"segments carry {K} steps, config expects {config.context_len}")
    if batch.states.shape[2] != config.state_dim:
        raise ShapeError(f"state dim {batch.states.shape[2]} != config {config.state_dim}")
    h = config.embed_dim
    dtype = params["embed_rtg_w"].dtype
    Lp = variant.prompt_len()

    roles: list[str] = []
    pieces: list[Tensor] = []

    if variant.uses_c or variant.uses_z:
        if variant.uses_c:
            if batch.c is None:
                raise ContractError("variant needs task parameters but the batch has none")
            if batch.c.shape != (B, config.param_dim):
                raise ShapeError(f"c has shape {batch.c.shape}, expected ({B}, {config.param_dim})")
            c_in = Tensor(batch.c.reshape(B, 1, config.param_dim).astype(dtype))
            c_tok = T.add(T.matmul(c_in, params["embed_param_w"]), params["embed_param_b"])
        z_toks = []
        if variant.uses_z:
            n = variant.learned_len
            idx = np.broadcast_to(np.arange(n), (B, n))
            z_toks = [T.embedding_lookup(params[name], idx) for name in ("prompt_z1", "prompt_z2", "prompt_z3")]
        if variant.tag == "task_learned":
            seq = [z_toks[0], c_tok, z_toks[1], c_tok, z_toks[2], c_tok]
            role_seq = (["prompt_z"] * variant.learned_len + ["prompt_c"]) * 3
            if variant.order == "blocked":
                seq = [c_tok, c_tok, c_tok] + z_toks
                role_seq = ["prompt_c"] * 3 + ["prompt_z"] * (3 * variant.learned_len)
        elif variant.tag == "task":
            seq = [c_tok, c_tok, c_tok]
            role_seq = ["prompt_c"] * 3
        else:  # pure_learned
            seq = z_toks
            role_seq = ["prompt_z"] * (3 * variant.learned_len)
        prompt = T.concat(seq, axis=1) if len(seq) > 1 else seq[0]
        pos_idx = np.broadcast_to(np.arange(Lp), (B, Lp))
        prompt = T.add(prompt, T.embedding_lookup(params["embed_prompt_pos"], pos_idx))
        pieces.append(prompt)
        roles.extend(role_seq)
    elif variant.uses_trajectory:
        if batch.prompt_rtg is None:
            raise ContractError("trajectory variant needs prompt steps in the batch")
        prompt = _embed_triples(
            batch.prompt_rtg, batch.prompt_states, batch.prompt_actions,
            batch.prompt_timesteps, config, params,
        )
        pieces.append(prompt)
        roles.extend(["prompt_traj"] * Lp)

    traj_tokens = _embed_triples(
        batch.rtg, batch.states, batch.actions, batch.timesteps, config, params
    )
    pieces.append(traj_tokens)
    roles.extend(["rtg", "state", "action"] * K)

    emb = T.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]

    token_valid = np.ones((B, Lp + 3 * K), dtype=bool)
    token_valid[:, Lp:] = np.repeat(batch.loss_mask, 3, axis=1)
    step_index = np.full((B, Lp + 3 * K), -1, dtype=np.int64)
    step_index[:, Lp:] = np.repeat(batch.timesteps, 3, axis=1)
    return TokenSequence(emb, token_valid, Lp, step_index, roles, batch.loss_mask.copy())


def embed_segment(
    segment: Segment, prompt: AssembledPrompt, config: ModelConfig, params: ParamStore
) -> TokenSequence:
    """Single-segment convenience wrapper around ``embed_batch``."""
    if segment.rtg.shape[0] > config.context_len:
        raise ContractError(
            f"segment has {segment.rtg.shape[0]} steps, more than context_len {config.context_len}"
        )
    return embed_batch(Batch.from_segments([segment], [prompt]), prompt.variant, config, params)


def causal_mask(len_prompt: int, K: int, token_valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Allow-matrix over one sequence: position i may attend to j iff
    j <= i and both are real tokens. Prompt tokens come first, so every
    trajectory token sees the whole prompt."""
    if len_prompt < 0 or K < 1:
        raise ContractError("need len_prompt >= 0 and K >= 1")
    L = len_prompt + 3 * K
    allowed = np.tril(np.ones((L, L), dtype=bool))
    if token_valid is not None:
        token_valid = np.asarray(token_valid, dtype=bool)
        allowed = allowed & token_valid[:, None] & token_valid[None, :]
    return allowed


def forward(
    tokens: TokenSequence,
    config: ModelConfig,
    params: ParamStore,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run the decoder stack and read an action prediction at every
    state-token position. Returns [B, K, d_a]."""
    if train_mode and config.dropout > 0.0 and rng is None:
        raise ContractError("training with dropout needs an rng")
    B, L, h = tokens.embeddings.shape
    K = config.context_len
    nh = config.n_heads
    dh = h // nh
    scale = 1.0 / np.sqrt(dh)

    tri = np.tril(np.ones((L, L), dtype=bool))
    allowed = tri[None, :, :] & tokens.token_valid[:, None, :] & tokens.token_valid[:, :, None]
    blocked = ~allowed
    dead_rows = ~tokens.token_valid[:, :, None]  # padded queries attend nowhere

    def drop(x):
        if train_mode and config.dropout > 0.0:
            return T.dropout(x, config.dropout, rng, train=True)
        return x

    x = T.layer_norm(tokens.embeddings, params["embed_ln_g"], params["embed_ln_b"], config.ln_eps)
    x = drop(x)

    for i in range(config.n_layers):
        xn = T.layer_norm(x, params[f"layer{i}_ln1_g"], params[f"layer{i}_ln1_b"], config.ln_eps)
        # project per head by slicing the packed qkv weight (cheap) rather
        # than the activations (whose slice backward would scatter into a
        # [B, L, 3h] zeros buffer every step)
        w_qkv = params[f"layer{i}_attn_qkv_w"]
        b_qkv = params[f"layer{i}_attn_qkv_b"]
        head_outs = []
        for j in range(nh):
            parts = []
            for role in range(3):  # q, k, v columns of the packed weight
                lo = role * h + j * dh
                wj = T.slice_axis(w_qkv, 1, lo, lo + dh)
                bj = T.slice_axis(b_qkv, 0, lo, lo + dh)
                parts.append(T.add(T.matmul(xn, wj), bj))
            q, k, v = parts
            scores = T.mul_scalar(T.matmul(q, T.transpose_last2(k)), scale)
            scores = T.masked_fill(scores, blocked, NEG_FILL)
            probs = T.softmax_lastdim(scores)
            probs = T.masked_fill(probs, dead_rows, 0.0)
            probs = drop(probs)
            head_outs.append(T.matmul(probs, v))
        attn = head_outs[0] if nh == 1 else T.concat(head_outs, axis=2)
        attn = drop(T.add(T.matmul(attn, params[f"layer{i}_attn_proj_w"]), params[f"layer{i}_attn_proj_b"]))
        x = T.add(x, attn)
        xn = T.layer_norm(x, params[f"layer{i}_ln2_g"], params[f"layer{i}_ln2_b"], config.ln_eps)
        mid = T.relu(T.add(T.matmul(xn, params[f"layer{i}_mlp_fc_w"]), params[f"layer{i}_mlp_fc_b"]))
        out = drop(T.add(T.matmul(mid, params[f"layer{i}_mlp_proj_w"]), params[f"layer{i}_mlp_proj_b"]))
        x = T.add(x, out)
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations after layer {i}")

    x = T.layer_norm(x, params["final_ln_g"], params["final_ln_b"], config.ln_eps)
    state_hidden = T.slice_axis(x, 1, tokens.prompt_len + 1, tokens.prompt_len + 3 * K, 3)
    pred = T.add(T.matmul(state_hidden, params["action_head_w"]), params["action_head_b"])
    if not np.isfinite(pred.data).all():
        raise NumericError("non-finite action predictions at the output head")
    return pred


def bc_loss(predicted: Tensor, target_actions, loss_mask) -> Tensor:
    """Squared-error imitation loss: per-step squared l2 distance to the
    demonstrated action, averaged over real (unpadded) steps."""
    mask = np.asarray(loss_mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ContractError("loss mask excludes every step")
    target = target_actions if isinstance(target_actions, Tensor) else Tensor(
        np.asarray(target_actions, dtype=predicted.dtype)
    )
    if target.shape != predicted.shape:
        raise ShapeError(f"prediction {predicted.shape} vs target {target.shape}")
    diff = T.add(predicted, T.mul_scalar(target, -1.0))
    masked = T.masked_fill(diff, ~mask[..., None], 0.0)
    mse = T.mean_squared_error(masked, Tensor(np.zeros(masked.shape, dtype=masked.dtype)))
    total_entries = int(np.prod(predicted.shape))
    return T.mul_scalar(mse, total_entries / n_valid)
