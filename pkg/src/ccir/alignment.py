"""Weakly-supervised concept alignment over joint reference+target tokens.

The two images' token sets are concatenated and contextualized by a small
transformer, pooled to a single vector by attention over tokens (the
multiple-instance view: the token set is the bag), scored against every
concept embedding by a raw dot product, and trained with an asymmetric
multi-label loss that softens the many uncertain negatives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .layers import (
    block_diag_mask,
    init_linear,
    init_transformer_layer,
    linear,
    segment_softmax_pool,
    transformer_layer,
)
from .tensor import ParameterSet, Tensor

JOINT_LAYERS = 2


@dataclass
class JointTokens:
    """Contextualized [reference rows; target rows] with the split index."""

    tokens: np.ndarray
    boundary: int

    def __post_init__(self):
        if not 0 < self.boundary < self.tokens.shape[0]:
            raise ValueError(
                f"boundary {self.boundary} outside (0, {self.tokens.shape[0]})"
            )


@dataclass
class AttentionPooling:
    weights: np.ndarray
    pooled: np.ndarray

    def __post_init__(self):
        if abs(float(self.weights.sum()) - 1.0) > 1e-6:
            raise ValueError("attention weights must sum to 1")
        if self.weights.min() < 0:
            raise ValueError("attention weights must be non-negative")


@dataclass
class AlignmentScores:
    s: np.ndarray
    s_prime: np.ndarray


@dataclass
class ConceptLabelVector:
    """Multi-hot labels over the concept vocabulary."""

    labels: np.ndarray

    def __post_init__(self):
        vals = set(np.unique(self.labels).tolist())
        if not vals <= {0.0, 1.0}:
            raise ValueError("labels must be 0/1")

    @classmethod
    def from_concepts(cls, concepts, vocabulary: list) -> "ConceptLabelVector":
        index = {c: i for i, c in enumerate(vocabulary)}
        vec = np.zeros(len(vocabulary), dtype=np.float32)
        for c in concepts:
            if c in index:
                vec[index[c]] = 1.0
        return cls(vec)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1.0)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0.0)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_joint_transformer(rng, params: dict, d: int, prefix: str = "joint") -> None:
    for i in range(JOINT_LAYERS):
        init_transformer_layer(rng, params, f"{prefix}/l{i}", d)


def init_attention_pool(rng, params: dict, d: int, prefix: str = "pool") -> None:
    init_linear(rng, params, prefix, d, 1)


# ---------------------------------------------------------------------------
# graph builders (batched: examples stacked along the row axis)
# ---------------------------------------------------------------------------


def joint_encode_batch_node(p, ref_stack, tgt_stack, n_examples: int,
                            l_ref: int, l_tgt: int, n_heads: int,
                            prefix: str = "joint"):
    """Concatenate per-example [ref rows; tgt rows] and contextualize.

    ref_stack: (n*l_ref) x d; tgt_stack: (n*l_tgt) x d.  Output keeps the
    example-major ordering with each example's reference rows first.
    """
    if ref_stack.shape[1] != tgt_stack.shape[1]:
        raise ag.ShapeError(
            f"joint encode: widths differ, {ref_stack.shape[1]} vs {tgt_stack.shape[1]}"
        )
    cat = ag.concat([ref_stack, tgt_stack], axis=0)
    order = []
    for i in range(n_examples):
        order.extend(range(i * l_ref, (i + 1) * l_ref))
        base = n_examples * l_ref
        order.extend(range(base + i * l_tgt, base + (i + 1) * l_tgt))
    x = ag.gather_rows(cat, order)
    mask = block_diag_mask([l_ref + l_tgt] * n_examples) if n_examples > 1 else None
    for i in range(JOINT_LAYERS):
        x = transformer_layer(p, f"{prefix}/l{i}", x, n_heads, mask)
    return x


def encode_tokens_batch_node(p, stack, n_examples: int, seg_len: int, n_heads: int,
                             prefix: str = "joint"):
    """Run the same contextualizer over single-image token segments."""
    mask = block_diag_mask([seg_len] * n_examples) if n_examples > 1 else None
    x = stack
    for i in range(JOINT_LAYERS):
        x = transformer_layer(p, f"{prefix}/l{i}", x, n_heads, mask)
    return x


def attention_pool_batch_node(p, tokens, n_examples: int, seg_len: int,
                              prefix: str = "pool"):
    """(weights (n*L) x 1, pooled n x d) for stacked equal-length segments."""
    logits = linear(p, prefix, tokens)
    return segment_softmax_pool(tokens, logits, n_examples, seg_len)


def alignment_scores_node(pooled, table):
    """Raw dot products against every concept row; pooled: n x d."""
    s = ag.matmul(pooled, ag.transpose(table))
    return s, ag.sigmoid(s)


def asymmetric_loss_node(s_logits, labels: np.ndarray, beta_plus: float,
                         beta_minus: float, batch_size: int | None = None):
    """Batched asymmetric multi-label loss from raw logits.

    Per example the positive/negative terms are summed; the total is
    divided by the batch size.  Rows with no positive label are masked
    out (degenerate supervision).
    """
    labels = np.asarray(labels, dtype=np.float32)
    if labels.ndim == 1:
        labels = labels[None, :]
    n = batch_size if batch_size is not None else labels.shape[0]
    row_live = (labels.sum(axis=1, keepdims=True) > 0).astype(np.float32)
    if row_live.sum() < labels.shape[0]:
        warnings.warn("asymmetric loss: skipping example(s) with no positive concept")

    y = ag.leaf(labels)
    sp = ag.sigmoid(s_logits)
    log_sp = -ag.softplus(-s_logits)      # log sigmoid(s), stable
    log_1msp = -ag.softplus(s_logits)     # log (1 - sigmoid(s)), stable
    pos = y * ag.powc(1.0 - sp, beta_plus) * log_sp
    neg = (1.0 - y) * ag.powc(sp, beta_minus) * log_1msp
    per_example = ag.sum_(pos + neg, axis=1, keepdims=True)
    total = ag.sum_(per_example * ag.leaf(row_live))
    return -total * (1.0 / float(n))


# ---------------------------------------------------------------------------
# numpy-side API (single example, forward only)
# ---------------------------------------------------------------------------


def joint_encode(f_r: np.ndarray, f_t: np.ndarray, params: ParameterSet,
                 n_heads: int = 2, prefix: str = "joint") -> JointTokens:
    p = {k: ag.leaf(v) for k, v in params.items()}
    node = joint_encode_batch_node(
        p, ag.leaf(f_r), ag.leaf(f_t), 1, f_r.shape[0], f_t.shape[0], n_heads, prefix
    )
    return JointTokens(node.value.astype(np.float32), boundary=f_r.shape[0])


def attention_pool(tokens: np.ndarray, params: ParameterSet,
                   prefix: str = "pool") -> AttentionPooling:
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"need a non-empty L x d token matrix, got {tokens.shape}")
    p = {k: ag.leaf(v) for k, v in params.items()}
    w, pooled = attention_pool_batch_node(p, ag.leaf(tokens), 1, tokens.shape[0], prefix)
    return AttentionPooling(
        weights=w.value.reshape(-1).astype(np.float32),
        pooled=pooled.value[0].astype(np.float32),
    )


def alignment_scores(pooled: np.ndarray, table: np.ndarray) -> AlignmentScores:
    table = table.data if isinstance(table, Tensor) else np.asarray(table)
    if pooled.shape[-1] != table.shape[1]:
        raise ValueError(f"width mismatch: pooled {pooled.shape} vs table {table.shape}")
    s64 = table.astype(np.float64) @ pooled.astype(np.float64)
    sp64 = 1.0 / (1.0 + np.exp(-s64))
    return AlignmentScores(s=s64.astype(np.float32), s_prime=sp64.astype(np.float32))


def asymmetric_loss(scores: AlignmentScores, labels: ConceptLabelVector,
                    beta_plus: float = 1.0, beta_minus: float = 4.0) -> float:
    """Single-example loss (positive and negative terms summed)."""
    if beta_plus < 0 or beta_minus < 0:
        raise ValueError("focusing exponents must be non-negative")
    y = labels.labels.astype(np.float64)
    if scores.s.shape != y.shape:
        raise ValueError(f"scores {scores.s.shape} vs labels {y.shape}")
    if y.sum() == 0:
        warnings.warn("asymmetric loss: no positive concept, example skipped")
        return 0.0
    s = scores.s.astype(np.float64)
    sp = 1.0 / (1.0 + np.exp(-s))
    log_sp = -np.logaddexp(0.0, -s)
    log_1msp = -np.logaddexp(0.0, s)
    pos = y * (1.0 - sp) ** beta_plus * log_sp
    neg = (1.0 - y) * sp**beta_minus * log_1msp
    return float(-(pos + neg).sum())
