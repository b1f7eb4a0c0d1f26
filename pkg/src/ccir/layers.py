"""Graph-building neural layers shared across the model.

Each layer comes as a pair: ``init_*`` writes freshly initialized Tensors
into a plain dict keyed by parameter path, and the forward function builds
graph nodes from a matching dict of leaf nodes.  Weights start at
uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) and biases at zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    scale = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-scale, scale, size=shape).astype(np.float32))


# -- linear -----------------------------------------------------------------


def init_linear(rng, params: dict, prefix: str, fan_in: int, fan_out: int) -> None:
    params[prefix + "/w"] = uniform_init(rng, fan_in, (fan_in, fan_out))
    params[prefix + "/b"] = Tensor.zeros((fan_out,))


def linear(p, prefix: str, x):
    return ag.matmul(x, p[prefix + "/w"]) + p[prefix + "/b"]


# -- layer norm (learned affine) -------------------------------------------


def init_layer_norm(rng, params: dict, prefix: str, d: int) -> None:
    params[prefix + "/g"] = Tensor(np.ones(d, dtype=np.float32))
    params[prefix + "/b"] = Tensor.zeros((d,))


def layer_norm(p, prefix: str, x, eps: float = 1e-5):
    """Per-row standardization over channels with learned scale/shift."""
    m = ag.mean(x, axis=1, keepdims=True)
    v = ag.variance(x, axis=1, keepdims=True)
    norm = (x - m) / ag.sqrt(v + eps)
    return norm * p[prefix + "/g"] + p[prefix + "/b"]


# -- multi-head attention ---------------------------------------------------


def attention_core(q, k, v, n_heads: int, extra_scores=None):
    """Scaled dot-product attention on already-projected 2-D inputs.

    ``extra_scores`` (a constant array or node, broadcastable to Lq x Lk)
    is added to the logits before softmax; a block-diagonal 0/-1e9 pattern
    turns one call into many independent attention groups.
    """
    d = q.shape[1]
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = ag.matmul(q[:, cols], ag.transpose(k[:, cols])) * scale
        if extra_scores is not None:
            scores = scores + extra_scores
        att = ag.softmax(scores, axis=1)
        outs.append(ag.matmul(att, v[:, cols]))
    return ag.concat(outs, axis=1)


def init_mha(rng, params: dict, prefix: str, d: int) -> None:
    for name in ("q", "k", "v", "o"):
        init_linear(rng, params, f"{prefix}/{name}", d, d)


def mha(p, prefix: str, q_in, k_in, v_in, n_heads: int, extra_scores=None):
    q = linear(p, prefix + "/q", q_in)
    k = linear(p, prefix + "/k", k_in)
    v = linear(p, prefix + "/v", v_in)
    return linear(p, prefix + "/o", attention_core(q, k, v, n_heads, extra_scores))


# -- feed-forward -----------------------------------------------------------


def silu(x):
    return x * ag.sigmoid(x)


def init_ffn(rng, params: dict, prefix: str, d: int, hidden: int) -> None:
    init_linear(rng, params, prefix + "/in", d, hidden)
    init_linear(rng, params, prefix + "/out", hidden, d)


def ffn(p, prefix: str, x):
    return linear(p, prefix + "/out", silu(linear(p, prefix + "/in", x)))


# -- pre-norm transformer layer ---------------------------------------------


def init_transformer_layer(rng, params: dict, prefix: str, d: int, hidden: int | None = None) -> None:
    init_layer_norm(rng, params, prefix + "/ln1", d)
    init_mha(rng, params, prefix + "/attn", d)
    init_layer_norm(rng, params, prefix + "/ln2", d)
    init_ffn(rng, params, prefix + "/ffn", d, hidden or 2 * d)


def transformer_layer(p, prefix: str, x, n_heads: int, extra_scores=None):
    h = layer_norm(p, prefix + "/ln1", x)
    x = x + mha(p, prefix + "/attn", h, h, h, n_heads, extra_scores)
    h2 = layer_norm(p, prefix + "/ln2", x)
    return x + ffn(p, prefix + "/ffn", h2)


# -- GRU cell ---------------------------------------------------------------


def init_gru(rng, params: dict, prefix: str, in_dim: int, hidden: int) -> None:
    for gate in ("r", "z", "n"):
        params[f"{prefix}/{gate}/w"] = uniform_init(rng, in_dim, (in_dim, hidden))
        params[f"{prefix}/{gate}/u"] = uniform_init(rng, hidden, (hidden, hidden))
        params[f"{prefix}/{gate}/b"] = Tensor.zeros((hidden,))


def gru_step(p, prefix: str, x, h):
    """One gated recurrent update; x: N x in_dim, h: N x hidden."""

    def gate(name):
        return ag.matmul(x, p[f"{prefix}/{name}/w"]) + ag.matmul(
            h, p[f"{prefix}/{name}/u"]
        ) + p[f"{prefix}/{name}/b"]

    r = ag.sigmoid(gate("r"))
    z = ag.sigmoid(gate("z"))
    n = ag.tanh(
        ag.matmul(x, p[prefix + "/n/w"])
        + r * ag.matmul(h, p[prefix + "/n/u"])
        + p[prefix + "/n/b"]
    )
    return (1.0 - z) * n + z * h


def block_diag_mask(lengths, dtype=np.float32) -> np.ndarray:
    """Additive attention mask keeping each segment independent.

    Returns an (L x L) array, L = sum(lengths), with 0 inside each
    diagonal block and -1e9 elsewhere.
    """
    total = int(sum(lengths))
    mask = np.full((total, total), -1e9, dtype=dtype)
    start = 0
    for n in lengths:
        mask[start : start + n, start : start + n] = 0.0
        start += n
    return mask


def segment_softmax_pool(tokens, logits, n_segments: int, seg_len: int):
    """Attention-pool equal-length stacked segments in one shot.

    tokens: (n*L) x d node; logits: (n*L) x 1 node.  Returns (weights
    flattened to (n*L) x 1, pooled n x d).
    """
    w = ag.softmax(ag.reshape(logits, (n_segments, seg_len)), axis=1)
    w_flat = ag.reshape(w, (n_segments * seg_len, 1))
    picker = np.kron(np.eye(n_segments, dtype=np.float32), np.ones((1, seg_len), np.float32))
    pooled = ag.matmul(ag.leaf(picker), tokens * w_flat)
    return w_flat, pooled
