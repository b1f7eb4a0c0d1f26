"""Full-model parameter initialization and graph assembly.

The training program wires together, per batch: visual token encoding
(or cached frozen tokens), text encoding, the concept-alignment branch,
the progressive fusion branch, and the in-batch matching loss.  Ablation
flags reroute or drop branches; parameters for disabled branches still
exist and simply receive zero gradients.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .alignment import (
    alignment_scores_node,
    asymmetric_loss_node,
    attention_pool_batch_node,
    encode_tokens_batch_node,
    init_attention_pool,
    init_joint_transformer,
    joint_encode_batch_node,
)
from .config import TrainConfig
from .encoders import (
    encode_image_batch_node,
    encode_text_batch_node,
    init_concept_table,
    init_image_encoder,
    init_text_encoder,
)
from .fusion import (
    batch_classification_loss_node,
    fusion_sequence_batch_node,
    fusion_step_batch_node,
    instantiate_block_batch_node,
    l2_normalize_rows_node,
    total_loss_node,
)
from .layers import init_linear, linear
from .tensor import ParameterSet, Tensor

IMAGE_PREFIX = "image/"
FUSION_PREFIX = "fusion/"


def init_model_params(seed: int, cfg: TrainConfig, n_patches: int, patch_px: int,
                      channels: int, text_vocab_size: int, n_concepts: int,
                      concept_rows: Tensor | None = None) -> ParameterSet:
    """Seed-deterministic initialization of every model parameter."""
    rng = np.random.default_rng(seed)
    params: dict = {}
    init_image_encoder(rng, params, cfg.d, patch_px, channels, n_patches)
    init_text_encoder(rng, params, text_vocab_size, cfg.d)
    init_joint_transformer(rng, params, cfg.d)
    init_attention_pool(rng, params, cfg.d)
    init_concept_table(rng, params, n_concepts, cfg.d)
    if concept_rows is not None:
        if concept_rows.shape != (n_concepts, cfg.d):
            raise ValueError(
                f"concept rows {concept_rows.shape} != ({n_concepts}, {cfg.d})"
            )
        params["concepts/table"] = concept_rows
    from .fusion import init_fusion

    init_fusion(rng, params, cfg.d, cfg.k_steps, cfg.share_block_weights)
    init_linear(rng, params, "nofusion", 2 * cfg.d, cfg.d)
    return ParameterSet(params)


def _mean_pool_segments(tokens, n_segments: int, seg_len: int):
    picker = np.kron(
        np.eye(n_segments, dtype=np.float32), np.full((1, seg_len), 1.0 / seg_len, np.float32)
    )
    return ag.matmul(ag.leaf(picker), tokens)


def _visual_tokens(p, inputs, n_examples: int, seg_len: int, cfg: TrainConfig):
    """Reference/target token stacks, from pixels or a frozen cache."""
    if "ref_tokens" in inputs:
        return inputs["ref_tokens"], inputs["tgt_tokens"]
    all_tokens = encode_image_batch_node(
        p, "image", inputs["patches"], cfg.n_heads, 2 * n_examples
    )
    split = n_examples * seg_len
    return all_tokens[:split], all_tokens[split:]


def _fused_query(p, ref_tokens, q, word_feats, lengths, n_examples: int,
                 seg_len: int, cfg: TrainConfig):
    """Pooled query feature after K instantiated fusion steps."""
    indicators = fusion_sequence_batch_node(
        p, q, word_feats, lengths, cfg.k_steps, cfg.n_heads
    )
    f = ref_tokens
    for step, s_i in enumerate(indicators):
        inst = instantiate_block_batch_node(p, s_i)
        f = fusion_step_batch_node(
            p, f, inst, n_examples, seg_len, cfg.n_heads, step,
            cfg.share_block_weights, cfg.plain_layer_norm,
        )
    _, pooled = attention_pool_batch_node(p, f, n_examples, seg_len)
    return f, pooled


def build_training_program(ids_batch: list, labels: np.ndarray | None,
                           n_examples: int, seg_len: int, cfg: TrainConfig):
    """Program computing the combined loss for one batch.

    Inputs at run time: either "patches" ((2n*L) x patch_dim, references
    then targets) or cached "ref_tokens"/"tgt_tokens".  Word ids and
    concept labels ride along in the closure since they are integral.
    """

    def program(inputs, p):
        ref_tok, tgt_tok = _visual_tokens(p, inputs, n_examples, seg_len, cfg)
        word_feats, q, lengths = encode_text_batch_node(p, "text", ids_batch, cfg.d)

        outputs = {}

        # concept alignment branch
        if cfg.remove_concept_module or labels is None:
            l_c = None
        else:
            if cfg.reference_only:
                ctx = encode_tokens_batch_node(p, ref_tok, n_examples, seg_len, cfg.n_heads)
                pool_len = seg_len
            elif cfg.target_only:
                ctx = encode_tokens_batch_node(p, tgt_tok, n_examples, seg_len, cfg.n_heads)
                pool_len = seg_len
            else:
                ctx = joint_encode_batch_node(
                    p, ref_tok, tgt_tok, n_examples, seg_len, seg_len, cfg.n_heads
                )
                pool_len = 2 * seg_len
            weights, pooled_ctx = attention_pool_batch_node(p, ctx, n_examples, pool_len)
            s, _ = alignment_scores_node(pooled_ctx, p["concepts/table"])
            bp = 0.0 if cfg.cross_entropy_loss else cfg.beta_plus
            bm = 0.0 if cfg.cross_entropy_loss else cfg.beta_minus
            l_c = asymmetric_loss_node(s, labels, bp, bm, batch_size=n_examples)
            outputs["align_weights"] = weights

        # target-side feature for matching: pool the encoder tokens directly
        _, v = attention_pool_batch_node(p, tgt_tok, n_examples, seg_len)

        # query-side feature
        if cfg.remove_fusion:
            _, ref_pooled = attention_pool_batch_node(p, ref_tok, n_examples, seg_len)
            u = linear(p, "nofusion", ag.concat([ref_pooled, q], axis=1))
            fused = None
        else:
            fused, u = _fused_query(
                p, ref_tok, q, word_feats, lengths, n_examples, seg_len, cfg
            )

        score_mat = ag.matmul(l2_normalize_rows_node(u), ag.transpose(l2_normalize_rows_node(v)))
        if cfg.context_score_on and fused is not None:
            ctx_u = _mean_pool_segments(fused, n_examples, seg_len)
            ctx_v = _mean_pool_segments(tgt_tok, n_examples, seg_len)
            score_mat = score_mat + ag.matmul(
                l2_normalize_rows_node(ctx_u), ag.transpose(l2_normalize_rows_node(ctx_v))
            )

        l_m = batch_classification_loss_node(score_mat, cfg.gamma)
        loss = total_loss_node(l_m, l_c, 0.0 if l_c is None else cfg.alpha)
        outputs.update({
            "loss": loss,
            "L_m": l_m,
            "L_c": l_c if l_c is not None else ag.leaf(np.zeros(())),
            "scores": score_mat,
        })
        return outputs

    return program


# ---------------------------------------------------------------------------
# inference-side embedding (numpy in, numpy out)
# ---------------------------------------------------------------------------


def _params_to_nodes(params: ParameterSet) -> dict:
    return {k: ag.leaf(v) for k, v in params.items()}


def encode_images_array(params: ParameterSet, patch_stack: np.ndarray,
                        n_images: int, cfg: TrainConfig) -> np.ndarray:
    p = _params_to_nodes(params)
    node = encode_image_batch_node(p, "image", patch_stack, cfg.n_heads, n_images)
    return node.value.astype(np.float32)


def embed_targets(params: ParameterSet, token_stack: np.ndarray, n_images: int,
                  seg_len: int, cfg: TrainConfig) -> np.ndarray:
    """Pooled target features f_a for a stack of per-image tokens."""
    p = _params_to_nodes(params)
    _, v = attention_pool_batch_node(p, ag.leaf(token_stack), n_images, seg_len)
    return v.value.astype(np.float32)


def embed_queries(params: ParameterSet, ref_token_stack: np.ndarray,
                  ids_batch: list, n_examples: int, seg_len: int,
                  cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray | None]:
    """Pooled query features; also mean-pooled fused tokens when the
    context score is enabled (None otherwise)."""
    p = _params_to_nodes(params)
    ref_tok = ag.leaf(ref_token_stack)
    word_feats, q, lengths = encode_text_batch_node(p, "text", ids_batch, cfg.d)
    if cfg.remove_fusion:
        _, ref_pooled = attention_pool_batch_node(p, ref_tok, n_examples, seg_len)
        u = linear(p, "nofusion", ag.concat([ref_pooled, q], axis=1))
        return u.value.astype(np.float32), None
    fused, u = _fused_query(p, ref_tok, q, word_feats, lengths, n_examples, seg_len, cfg)
    ctx = None
    if cfg.context_score_on:
        ctx = _mean_pool_segments(fused, n_examples, seg_len).value.astype(np.float32)
    return u.value.astype(np.float32), ctx


def alignment_pass(params: ParameterSet, ref_tokens: np.ndarray, tgt_tokens: np.ndarray,
                   cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Joint attention weights and per-concept scores for one pair."""
    p = _params_to_nodes(params)
    l_ref, l_tgt = ref_tokens.shape[0], tgt_tokens.shape[0]
    ctx = joint_encode_batch_node(
        p, ag.leaf(ref_tokens), ag.leaf(tgt_tokens), 1, l_ref, l_tgt, cfg.n_heads
    )
    weights, pooled = attention_pool_batch_node(p, ctx, 1, l_ref + l_tgt)
    s, s_prime = alignment_scores_node(pooled, p["concepts/table"])
    return weights.value.reshape(-1).astype(np.float32), s_prime.value[0].astype(np.float32)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    return (x / np.maximum(norms, 1e-12)).astype(np.float32)
