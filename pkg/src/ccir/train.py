"""Training loop, evaluation, and diagnostic exports."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import ConceptLabelVector
from .autograd import NonFiniteError, forward_backward
from .config import TrainConfig
from .data import (
    ConceptVocabulary,
    ImageStore,
    build_vocabulary,
    parse_concepts,
    read_jsonl,
)
from .encoders import (
    build_text_vocab,
    concept_table_from_word_vectors,
    load_word_vectors,
    patchify,
    tokenize,
    words_to_ids,
)
from .metrics import Metrics, compute_metrics, visually_similar_subset
from .model import (
    alignment_pass,
    build_training_program,
    embed_queries,
    embed_targets,
    encode_images_array,
    init_model_params,
    l2_normalize_rows,
)
from .optim import OptimizerState, adamw_step, halved_lr, load_checkpoint, save_checkpoint
from .tensor import ParameterSet

EVAL_CHUNK = 32


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss; carries the offending batch."""

    def __init__(self, epoch: int, batch_index: int, cause: str):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}: {cause}"
        )
        self.epoch = epoch
        self.batch_index = batch_index


class DataError(RuntimeError):
    """Dataset files missing or malformed."""


@dataclass
class Checkpoint:
    params: ParameterSet
    opt_state: OptimizerState
    config: TrainConfig
    epoch: int
    text_vocab: list
    concept_vocab: ConceptVocabulary
    grid: tuple
    cell_px: int
    channels: int

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(path, self.params, self.opt_state)
        sidecar = {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "text_vocab": self.text_vocab,
            "concepts": self.concept_vocab.concepts,
            "concept_tags": self.concept_vocab.tags,
            "grid": list(self.grid),
            "cell_px": self.cell_px,
            "channels": self.channels,
        }
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        params, state = load_checkpoint(path)
        with open(path.with_suffix(".json"), encoding="utf-8") as fh:
            side = json.load(fh)
        return cls(
            params=params,
            opt_state=state if state is not None else OptimizerState.initial(params),
            config=TrainConfig.from_dict(side["config"]),
            epoch=side["epoch"],
            text_vocab=side["text_vocab"],
            concept_vocab=ConceptVocabulary(side["concepts"], side["concept_tags"]),
            grid=tuple(side["grid"]),
            cell_px=side["cell_px"],
            channels=side["channels"],
        )


@dataclass
class Dataset:
    """Loaded split files plus per-image patch matrices."""

    train: list
    val: list
    patches: dict
    grid: tuple
    cell_px: int
    channels: int

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.cell_px * self.cell_px * self.channels


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    for name in ("meta.json", "train.jsonl", "val.jsonl", "images.nct", "images.idx.json"):
        if not (root / name).exists():
            raise DataError(f"missing dataset file {root / name}")
    with open(root / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    train = read_jsonl(root / "train.jsonl")
    val = read_jsonl(root / "val.jsonl")
    if not train or not val:
        raise DataError("empty dataset split")
    store = ImageStore(root / "images.nct", root / "images.idx.json")
    cell_px = meta["cell_px"]
    patches = {}
    for rec in train + val:
        for key in ("ref_image", "tgt_image"):
            img_id = rec[key]
            if img_id not in patches:
                if img_id not in store:
                    raise DataError(f"image id {img_id!r} referenced but not stored")
                patches[img_id] = patchify(store.get(img_id), cell_px)
    store.close()
    return Dataset(
        train=train,
        val=val,
        patches=patches,
        grid=tuple(meta["grid"]),
        cell_px=cell_px,
        channels=meta["channels"],
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _prepare_examples(records, text_index, concept_vocab, pos_classes):
    ids_list, labels = [], []
    for rec in records:
        words = tokenize(rec["modifier"])
        ids_list.append(words_to_ids(words, text_index))
        concepts = parse_concepts(rec["modifier"], pos_set=frozenset(pos_classes))
        labels.append(
            ConceptLabelVector.from_concepts(concepts, concept_vocab.concepts).labels
        )
    return ids_list, np.stack(labels) if labels else None


def _encode_token_cache(params, dataset: Dataset, cfg: TrainConfig) -> dict:
    ids = sorted(dataset.patches)
    cache = {}
    for start in range(0, len(ids), EVAL_CHUNK):
        chunk = ids[start : start + EVAL_CHUNK]
        stack = np.concatenate([dataset.patches[i] for i in chunk])
        toks = encode_images_array(params, stack, len(chunk), cfg)
        L = dataset.n_patches
        for j, img_id in enumerate(chunk):
            cache[img_id] = toks[j * L : (j + 1) * L]
    return cache


def train(cfg: TrainConfig, data_dir, out_dir=None, log_name="metrics.jsonl",
          verbose: bool = False):
    """Full training run; returns (Checkpoint, list of per-epoch records)."""
    t_start = time.time()
    dataset = load_dataset(data_dir)
    train_modifiers = [r["modifier"] for r in dataset.train]
    text_vocab = build_text_vocab(train_modifiers)
    text_index = {w: i for i, w in enumerate(text_vocab)}
    concept_vocab = build_vocabulary(train_modifiers, pos_set=cfg.pos_classes)

    concept_rows = None
    if cfg.word_vector_file:
        vectors = load_word_vectors(cfg.word_vector_file, cfg.d)
        concept_rows = concept_table_from_word_vectors(
            np.random.default_rng(cfg.seed + 1), concept_vocab.concepts, cfg.d, vectors
        )

    params = init_model_params(
        cfg.seed, cfg, dataset.n_patches, dataset.cell_px, dataset.channels,
        len(text_vocab), len(concept_vocab), concept_rows,
    )
    state = OptimizerState.initial(params)

    ids_all, labels_all = _prepare_examples(
        dataset.train, text_index, concept_vocab, cfg.pos_classes
    )

    L = dataset.n_patches
    order_rng = np.random.default_rng(cfg.seed + 101)
    token_cache = None
    subsets_cache: dict = {}
    records = []
    out_root = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_root / log_name, "w", encoding="utf-8")

    def trainable_predicate(frozen_encoder):
        def keep(path):
            if frozen_encoder and path.startswith("image/"):
                return False
            if not cfg.concepts_trainable and path.startswith("concepts/"):
                return False
            return True

        return keep

    try:
        for epoch in range(cfg.epochs):
            lr = halved_lr(cfg.lr, epoch, cfg.decay_every, cfg.decay_factor)
            frozen = epoch < cfg.freeze_epochs
            if frozen and token_cache is None:
                token_cache = _encode_token_cache(params, dataset, cfg)
            if not frozen:
                token_cache = None

            order = order_rng.permutation(len(dataset.train))
            sums = {"L_m": 0.0, "L_c": 0.0, "L": 0.0}
            n_batches = 0
            for b_start in range(0, len(order), cfg.batch_size):
                batch_idx = order[b_start : b_start + cfg.batch_size]
                if len(batch_idx) < 2:
                    continue
                n = len(batch_idx)
                batch = [dataset.train[i] for i in batch_idx]
                ids_batch = [ids_all[i] for i in batch_idx]
                labels = labels_all[batch_idx]

                if frozen:
                    inputs = {
                        "ref_tokens": np.concatenate(
                            [token_cache[r["ref_image"]] for r in batch]
                        ),
                        "tgt_tokens": np.concatenate(
                            [token_cache[r["tgt_image"]] for r in batch]
                        ),
                    }
                else:
                    inputs = {
                        "patches": np.concatenate(
                            [dataset.patches[r["ref_image"]] for r in batch]
                            + [dataset.patches[r["tgt_image"]] for r in batch]
                        )
                    }

                program = build_training_program(ids_batch, labels, n, L, cfg)
                try:
                    outs, grads = forward_backward(program, inputs, params)
                except NonFiniteError as e:
                    raise NumericFailure(epoch, n_batches, str(e)) from e

                keep = trainable_predicate(frozen)
                updated, state = adamw_step(
                    params.subset(keep), grads.subset(keep), state,
                    lr=lr, weight_decay=cfg.weight_decay,
                )
                params = params.merge(updated)

                sums["L_m"] += float(outs["L_m"].data)
                sums["L_c"] += float(outs["L_c"].data)
                sums["L"] += float(outs["loss"].data)
                n_batches += 1

            ckpt = Checkpoint(
                params, state, cfg, epoch, text_vocab, concept_vocab,
                dataset.grid, dataset.cell_px, dataset.channels,
            )
            record = {
                "epoch": epoch,
                "L_m": sums["L_m"] / max(n_batches, 1),
                "L_c": sums["L_c"] / max(n_batches, 1),
                "L": sums["L"] / max(n_batches, 1),
                "lr": lr,
            }
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                m = evaluate(ckpt, dataset.val, dataset, subsets_cache=subsets_cache)
                record["recall"] = m.to_dict()
            else:
                record["recall"] = {}
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if verbose:
                agg = record["recall"].get("aggregate")
                print(
                    f"epoch {epoch:3d} L={record['L']:.4f} L_m={record['L_m']:.4f} "
                    f"L_c={record['L_c']:.6f} lr={lr:.2e}"
                    + (f" agg={agg:.3f}" if agg is not None else "")
                    + f" [{time.time() - t_start:.0f}s]",
                    flush=True,
                )
    finally:
        if log_fh is not None:
            log_fh.close()

    if out_root is not None:
        ckpt.save(out_root / "model.nck")
    return ckpt, records


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _gallery_of(records) -> list:
    return sorted({r["tgt_image"] for r in records})


def frozen_encoder_features(dataset: Dataset, cfg: TrainConfig, gallery_ids) -> np.ndarray:
    """Mean-pooled tokens from a freshly seed-initialized encoder.

    Checkpoint-independent by construction, so candidate subsets stay
    comparable across model variants trained on the same data+seed.
    """
    base = init_model_params(
        cfg.seed, cfg, dataset.n_patches, dataset.cell_px, dataset.channels, 1, 1
    )
    L = dataset.n_patches
    feats = np.empty((len(gallery_ids), cfg.d), dtype=np.float32)
    for start in range(0, len(gallery_ids), EVAL_CHUNK):
        chunk = gallery_ids[start : start + EVAL_CHUNK]
        stack = np.concatenate([dataset.patches[i] for i in chunk])
        toks = encode_images_array(base, stack, len(chunk), cfg)
        for j in range(len(chunk)):
            feats[start + j] = toks[j * L : (j + 1) * L].mean(axis=0)
    return feats


def evaluate(ckpt: Checkpoint, query_records, dataset: Dataset,
             gallery_ids=None, score_dump_path=None, subsets_cache: dict | None = None) -> Metrics:
    cfg = ckpt.config
    L = dataset.n_patches
    if gallery_ids is None:
        gallery_ids = _gallery_of(query_records)
    gallery_ids = sorted(gallery_ids)
    gallery_pos = {g: i for i, g in enumerate(gallery_ids)}
    for rec in query_records:
        if rec["tgt_image"] not in gallery_pos:
            raise DataError(f"gallery is missing ground-truth target {rec['tgt_image']!r}")

    # target-side features
    v = np.empty((len(gallery_ids), cfg.d), dtype=np.float32)
    tgt_mean = np.empty((len(gallery_ids), cfg.d), dtype=np.float32) if cfg.context_score_on else None
    for start in range(0, len(gallery_ids), EVAL_CHUNK):
        chunk = gallery_ids[start : start + EVAL_CHUNK]
        stack = np.concatenate([dataset.patches[g] for g in chunk])
        toks = encode_images_array(ckpt.params, stack, len(chunk), cfg)
        v[start : start + len(chunk)] = embed_targets(
            ckpt.params, toks, len(chunk), L, cfg
        )
        if tgt_mean is not None:
            for j in range(len(chunk)):
                tgt_mean[start + j] = toks[j * L : (j + 1) * L].mean(axis=0)

    # query-side features
    text_index = {w: i for i, w in enumerate(ckpt.text_vocab)}
    u = np.empty((len(query_records), cfg.d), dtype=np.float32)
    ctx_u = np.empty_like(u) if cfg.context_score_on else None
    for start in range(0, len(query_records), EVAL_CHUNK):
        chunk = query_records[start : start + EVAL_CHUNK]
        stack = np.concatenate([dataset.patches[r["ref_image"]] for r in chunk])
        toks = encode_images_array(ckpt.params, stack, len(chunk), cfg)
        ids_batch = [words_to_ids(tokenize(r["modifier"]), text_index) for r in chunk]
        uu, cc = embed_queries(ckpt.params, toks, ids_batch, len(chunk), L, cfg)
        u[start : start + len(chunk)] = uu
        if ctx_u is not None and cc is not None:
            ctx_u[start : start + len(chunk)] = cc

    scores = l2_normalize_rows(u) @ l2_normalize_rows(v).T
    if cfg.context_score_on and ctx_u is not None:
        scores = scores + l2_normalize_rows(ctx_u) @ l2_normalize_rows(tgt_mean).T

    target_indices = [gallery_pos[r["tgt_image"]] for r in query_records]

    # visually-similar candidate subsets from the frozen seed-init encoder
    cache_key = (tuple(gallery_ids), cfg.seed, cfg.subset_size)
    if subsets_cache is not None and cache_key in subsets_cache:
        subset_of_target = subsets_cache[cache_key]
    else:
        feats = frozen_encoder_features(dataset, cfg, gallery_ids)
        id_order = np.argsort(np.argsort(np.asarray(gallery_ids, dtype=object)))
        subset_of_target = {
            t: visually_similar_subset(t, feats, cfg.subset_size, id_order)
            for t in sorted(set(target_indices))
        }
        if subsets_cache is not None:
            subsets_cache[cache_key] = subset_of_target
    subsets = [subset_of_target[t] for t in target_indices]

    m = compute_metrics(
        scores, target_indices, gallery_ids, subsets, cfg.recall_ks, cfg.subset_ks
    )

    if score_dump_path is not None:
        id_order = np.argsort(np.argsort(np.asarray(gallery_ids, dtype=object)))
        with open(score_dump_path, "w", encoding="utf-8") as fh:
            for i, rec in enumerate(query_records):
                order = np.lexsort((id_order, -scores[i].astype(np.float64)))
                fh.write(json.dumps({
                    "query": rec["id"],
                    "ranked": [gallery_ids[j] for j in order],
                    "scores": [round(float(scores[i, j]), 6) for j in order],
                }, sort_keys=True) + "\n")
    return m


# ---------------------------------------------------------------------------
# alignment diagnostics
# ---------------------------------------------------------------------------


def alignment_record(ckpt: Checkpoint, rec: dict, dataset: Dataset) -> dict:
    """Attention weights and per-concept scores for one triplet."""
    cfg = ckpt.config
    L = dataset.n_patches
    ref_tok = encode_images_array(ckpt.params, dataset.patches[rec["ref_image"]], 1, cfg)
    tgt_tok = encode_images_array(ckpt.params, dataset.patches[rec["tgt_image"]], 1, cfg)
    weights, s_prime = alignment_pass(ckpt.params, ref_tok, tgt_tok, cfg)
    concept_scores = {
        c: float(s_prime[ckpt.concept_vocab.index[c]])
        for c in rec["concepts"]
        if c in ckpt.concept_vocab
    }
    return {
        "id": rec["id"],
        "concepts": rec["concepts"],
        "concept_scores": concept_scores,
        "attention": [float(w) for w in weights],
        "boundary": L,
    }


def export_alignment_diagnostics(ckpt: Checkpoint, records, dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(alignment_record(ckpt, rec, dataset), sort_keys=True) + "\n")


def export_alignment_heatmap(ckpt: Checkpoint, rec: dict, concept: str,
                             dataset: Dataset, out_prefix) -> dict:
    """Side-by-side attention grids as a portable PGM plus a JSON sidecar."""
    if concept not in ckpt.concept_vocab:
        raise KeyError(f"concept {concept!r} not in the model vocabulary")
    diag = alignment_record(ckpt, rec, dataset)
    gh, gw = ckpt.grid
    w = np.asarray(diag["attention"], dtype=np.float64)
    ref_grid = w[: gh * gw].reshape(gh, gw)
    tgt_grid = w[gh * gw :].reshape(gh, gw)
    joint = np.concatenate([ref_grid, tgt_grid], axis=1)
    peak = joint.max() if joint.max() > 0 else 1.0
    levels = np.round(joint / peak * 255).astype(int)

    pgm_path = Path(str(out_prefix) + ".pgm")
    with open(pgm_path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{joint.shape[1]} {joint.shape[0]}\n255\n")
        for row in levels:
            fh.write(" ".join(str(x) for x in row) + "\n")

    score = diag["concept_scores"].get(concept)
    if score is None:
        ref_tok = encode_images_array(
            ckpt.params, dataset.patches[rec["ref_image"]], 1, ckpt.config
        )
        tgt_tok = encode_images_array(
            ckpt.params, dataset.patches[rec["tgt_image"]], 1, ckpt.config
        )
        _, s_prime = alignment_pass(ckpt.params, ref_tok, tgt_tok, ckpt.config)
        score = float(s_prime[ckpt.concept_vocab.index[concept]])
    sidecar = {
        "id": rec["id"],
        "concept": concept,
        "score": score,
        "attention": diag["attention"],
        "boundary": diag["boundary"],
        "grid": [gh, gw],
    }
    json_path = Path(str(out_prefix) + ".json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
    return {"pgm": str(pgm_path), "json": str(json_path)}
