"""Progressive fusion of reference tokens with the modifier.

The modifier is decomposed into K step indicators (attended summaries of
its word features).  A single transformer block is re-instantiated per
step: four generator heads map the indicator to the scale/shift pairs of
the block's two normalization sites, while the block's attention and
feed-forward weights stay shared across steps.  Iterating the block K
times from the raw reference tokens yields the fused query feature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .layers import (
    attention_core,
    block_diag_mask,
    ffn,
    init_ffn,
    init_layer_norm,
    init_linear,
    init_mha,
    layer_norm,
    linear,
    mha,
)
from .tensor import ParameterSet

NORM_EPS = 1e-5
COSINE_EPS = 1e-12


@dataclass
class FusionProgram:
    """K step indicators, one row each."""

    indicators: np.ndarray

    def __post_init__(self):
        if self.indicators.ndim != 2 or self.indicators.shape[0] < 1:
            raise ValueError(f"need K>=1 indicator rows, got {self.indicators.shape}")
        if not np.isfinite(self.indicators).all():
            raise ValueError("non-finite fusion indicators")


@dataclass
class BlockInstance:
    """Generated normalization parameters for one fusion step."""

    mu1: np.ndarray
    sigma1: np.ndarray
    mu2: np.ndarray
    sigma2: np.ndarray


@dataclass
class FusedTokens:
    tokens: np.ndarray
    step: int


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def block_prefix(prefix: str, step: int, shared: bool) -> str:
    return f"{prefix}/block" if shared else f"{prefix}/block{step}"


def init_fusion(rng, params: dict, d: int, k_steps: int, share_block: bool = True,
                prefix: str = "fusion") -> None:
    for i in range(k_steps):
        init_linear(rng, params, f"{prefix}/seq/fc{i}", d, d)
    init_mha(rng, params, f"{prefix}/seq/attn", d)
    for head in ("mu1", "sg1", "mu2", "sg2"):
        init_linear(rng, params, f"{prefix}/gen/{head}", d, d)
    n_blocks = 1 if share_block else k_steps
    for b in range(n_blocks):
        bp = block_prefix(prefix, b, share_block)
        init_linear(rng, params, bp + "/qkv", d, 3 * d)
        init_linear(rng, params, bp + "/attn_o", d, d)
        init_ffn(rng, params, bp + "/ffn", d, 2 * d)
        # learned-affine site norms, used only by the plain-LN variant
        init_layer_norm(rng, params, bp + "/ln1", d)
        init_layer_norm(rng, params, bp + "/ln2", d)


# ---------------------------------------------------------------------------
# graph builders (batched)
# ---------------------------------------------------------------------------


def fusion_sequence_batch_node(p, q, word_feats, lengths, k_steps: int, n_heads: int,
                               prefix: str = "fusion"):
    """K indicators per example: attended word summaries driven by FC_i(q).

    q: n x d; word_feats: (sum L_w) x d example-major.  Returns a list of
    K nodes, each n x d.
    """
    n = q.shape[0]
    total = int(sum(lengths))
    mask = np.full((n, total), -1e9, dtype=np.float32)
    start = 0
    for i, L in enumerate(lengths):
        mask[i, start : start + L] = 0.0
        start += L
    indicators = []
    for i in range(k_steps):
        fq = linear(p, f"{prefix}/seq/fc{i}", q)
        s_i = mha(p, f"{prefix}/seq/attn", fq, word_feats, word_feats, n_heads, mask)
        indicators.append(s_i)
    return indicators


def instantiate_block_batch_node(p, s_i, prefix: str = "fusion"):
    """Four affine heads map indicators (n x d) to per-example (mu, sigma)."""
    return {
        "mu1": linear(p, f"{prefix}/gen/mu1", s_i),
        "sg1": linear(p, f"{prefix}/gen/sg1", s_i),
        "mu2": linear(p, f"{prefix}/gen/mu2", s_i),
        "sg2": linear(p, f"{prefix}/gen/sg2", s_i),
    }


def adaptive_norm_node(x, mu, sigma, eps: float = NORM_EPS):
    """Per-row standardization, then externally supplied scale and shift."""
    m = ag.mean(x, axis=1, keepdims=True)
    v = ag.variance(x, axis=1, keepdims=True)
    return sigma * ((x - m) / ag.sqrt(v + eps)) + mu


def fusion_step_batch_node(p, f_prev, inst, n_examples: int, seg_len: int,
                           n_heads: int, step: int, share_block: bool = True,
                           plain_ln: bool = False, prefix: str = "fusion"):
    """One instantiated block application over stacked reference tokens.

    f_prev: (n*L) x d; inst: generator outputs, each n x d (ignored when
    plain_ln selects the learned layer-norm affine instead).
    """
    bp = block_prefix(prefix, step, share_block)
    rep = np.repeat(np.arange(n_examples), seg_len)

    def site_norm(x, which: str):
        if plain_ln:
            return layer_norm(p, f"{bp}/ln{which}", x)
        mu = ag.gather_rows(inst["mu" + which], rep)
        sg = ag.gather_rows(inst["sg" + which], rep)
        return adaptive_norm_node(x, mu, sg)

    f1 = site_norm(f_prev, "1")
    qkv = linear(p, bp + "/qkv", f1)
    d = f1.shape[1]
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    mask = block_diag_mask([seg_len] * n_examples) if n_examples > 1 else None
    att = linear(p, bp + "/attn_o", attention_core(q, k, v, n_heads, mask))
    f2 = att + f1
    f3 = site_norm(f2, "2")
    return ffn(p, bp + "/ffn", f3) + f3


def l2_normalize_rows_node(x):
    """Rows scaled to unit length; all-zero rows map to all-zero rows."""
    sq = ag.sum_(x * x, axis=1, keepdims=True)
    return x / ag.sqrt(sq + COSINE_EPS**2)


def batch_classification_loss_node(score_matrix, gamma: float):
    """-mean_i log softmax_row(gamma * scores)_ii over an n x n matrix."""
    n = score_matrix.shape[0]
    probs = ag.softmax(score_matrix * float(gamma), axis=1)
    diag = probs[np.arange(n), np.arange(n)]
    return -ag.mean(ag.log(diag))


def total_loss_node(l_m, l_c, alpha: float):
    if alpha < 0:
        raise ValueError(f"loss weight must be non-negative, got {alpha}")
    if l_c is None or alpha == 0.0:
        return l_m
    return l_m + float(alpha) * l_c


# ---------------------------------------------------------------------------
# numpy-side API (single example / plain arrays)
# ---------------------------------------------------------------------------


def fusion_sequence(q: np.ndarray, t: np.ndarray, params: ParameterSet, k_steps: int,
                    n_heads: int = 2, prefix: str = "fusion") -> FusionProgram:
    if q.shape[-1] != t.shape[1]:
        raise ValueError(f"width mismatch: q {q.shape} vs t {t.shape}")
    p = {key: ag.leaf(v) for key, v in params.items()}
    nodes = fusion_sequence_batch_node(
        p, ag.leaf(q[None, :]), ag.leaf(t), [t.shape[0]], k_steps, n_heads, prefix
    )
    rows = np.stack([nd.value[0] for nd in nodes]).astype(np.float32)
    return FusionProgram(rows)


def instantiate_block(s_i: np.ndarray, params: ParameterSet,
                      prefix: str = "fusion") -> BlockInstance:
    p = {key: ag.leaf(v) for key, v in params.items()}
    out = instantiate_block_batch_node(p, ag.leaf(s_i[None, :]), prefix)
    return BlockInstance(
        mu1=out["mu1"].value[0].astype(np.float32),
        sigma1=out["sg1"].value[0].astype(np.float32),
        mu2=out["mu2"].value[0].astype(np.float32),
        sigma2=out["sg2"].value[0].astype(np.float32),
    )


def adaptive_norm(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                  eps: float = NORM_EPS) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    m = x64.mean(axis=-1, keepdims=True)
    v = x64.var(axis=-1, keepdims=True)
    return (sigma * (x64 - m) / np.sqrt(v + eps) + mu).astype(np.float32)


def fusion_step(f_prev: FusedTokens, inst: BlockInstance, params: ParameterSet,
                n_heads: int = 2, step: int = 0, share_block: bool = True,
                prefix: str = "fusion") -> FusedTokens:
    p = {key: ag.leaf(v) for key, v in params.items()}
    inst_nodes = {
        "mu1": ag.leaf(inst.mu1[None, :]),
        "sg1": ag.leaf(inst.sigma1[None, :]),
        "mu2": ag.leaf(inst.mu2[None, :]),
        "sg2": ag.leaf(inst.sigma2[None, :]),
    }
    node = fusion_step_batch_node(
        p, ag.leaf(f_prev.tokens), inst_nodes, 1, f_prev.tokens.shape[0],
        n_heads, step, share_block, prefix=prefix,
    )
    return FusedTokens(node.value.astype(np.float32), step=f_prev.step + 1)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero-norm inputs score 0 with a warning."""
    u64, v64 = np.asarray(u, np.float64), np.asarray(v, np.float64)
    nu, nv = np.linalg.norm(u64), np.linalg.norm(v64)
    if nu < COSINE_EPS or nv < COSINE_EPS:
        warnings.warn("cosine: zero-norm vector, score defined as 0")
        return 0.0
    return float(u64 @ v64 / (nu * nv))


def matching_score(fused: FusedTokens, target_pooled: np.ndarray,
                   params: ParameterSet, pool_prefix: str = "pool") -> float:
    """Pool the fused tokens with the shared attention head, then cosine."""
    from .alignment import attention_pool

    pooled = attention_pool(fused.tokens, params, prefix=pool_prefix).pooled
    return cosine(pooled, target_pooled)


def batch_classification_loss(score_matrix: np.ndarray, gamma: float) -> float:
    m = np.asarray(score_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"need a square score matrix, got {m.shape}")
    z = gamma * m
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(np.diag(log_probs)))


def total_loss(l_m: float, l_c: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError(f"loss weight must be non-negative, got {alpha}")
    return float(l_m + alpha * l_c)
