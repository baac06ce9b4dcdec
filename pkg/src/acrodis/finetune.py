"""Supervised contrastive fine-tuning and inference.

Each (sentence, candidate) pair yields a feature [h_x ; h_T]: the context
representation at the acronym position of the unmasked sentence concatenated
with the candidate's phrase-averaged slot representation, both produced by the
same (trainable) encoder.  A sigmoid classifier scores the feature directly;
a bias-free two-layer ReLU projection feeds the per-example contrastive term,
whose anchor is the projection of [h_x ; h_x].

The training objective is the lambda-weighted mix of the two mean
cross-entropies (positive and negative features) and the contrastive term.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    CLS_ID,
    MASK_ID,
    SEP_ID,
    AcronymExample,
    CandidateSet,
    Dictionary,
    Vocabulary,
    sample_candidates,
    truncate_example,
)
from .encoder import (
    EncoderConfig,
    ModelBundle,
    Params,
    cosine_grad_u,
    embed_backward,
    embed_batch,
    encoder_backward,
    encoder_forward,
)
from .errors import NumericalError, ParameterError, ValidationError
from .evaluation import macro_metrics
from .optim import AdamW, warmup_epoch_anneal
from .seeding import derive_seed

POSITIVE = "positive"
NEGATIVE = "negative"

HEAD_PARAM_NAMES = ("proj_w1", "proj_w2", "cls_w", "cls_b")


@dataclass
class FinetuneConfig:
    epochs: int = 15
    batch_size: int = 32
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    warmup_epochs: int = 1
    lambda_weight: float = 0.5
    tau: float = 0.02
    negatives: int = 2
    proj_hidden: int = 64
    proj_out: int = 32
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not (0.0 <= self.lambda_weight <= 1.0):
            raise ParameterError("lambda_weight must be in [0, 1]")
        if self.tau <= 0:
            raise ParameterError("tau must be positive")


@dataclass
class CandidateFeature:
    """Concatenated context/candidate representation for one pair."""

    example_id: str
    h_x: np.ndarray  # (d,)
    h_t: np.ndarray  # (d,)
    label: str | None = None  # POSITIVE / NEGATIVE / None for inference

    @property
    def h(self) -> np.ndarray:
        return np.concatenate([self.h_x, self.h_t])


@dataclass
class ScoredCandidates:
    """Per-candidate probabilities for one example, covering the full
    candidate list of its short form."""

    example_id: str
    scores: list[tuple[str, float]]

    @property
    def predicted(self) -> str:
        best, best_p = self.scores[0]
        for cand, p in self.scores[1:]:
            if p > best_p:
                best, best_p = cand, p
        return best


def init_head_params(config: EncoderConfig, ft: FinetuneConfig, seed) -> Params:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    two_d = 2 * config.hidden_dim
    return {
        "proj_w1": rng.normal(0.0, 0.02, (two_d, ft.proj_hidden)),
        "proj_w2": rng.normal(0.0, 0.02, (ft.proj_hidden, ft.proj_out)),
        "cls_w": rng.normal(0.0, 0.02, two_d),
        "cls_b": np.zeros(()),
    }


def project(h, params: Params) -> np.ndarray:
    """Bias-free non-linear projection W2 . relu(W1 . h)."""
    h = np.asarray(h, dtype=np.float64)
    return np.maximum(h @ params["proj_w1"], 0.0) @ params["proj_w2"]


def classify(h, params: Params) -> float:
    """Probability that the candidate is the true expansion (sigmoid of a
    linear function of the feature)."""
    h = np.asarray(h, dtype=np.float64)
    logit = float(h @ params["cls_w"] + params["cls_b"])
    return 1.0 / (1.0 + math.exp(-logit))


def _bce(prob: float, label: int) -> float:
    eps = 1e-300
    return -math.log(prob + eps) if label == 1 else -math.log(1.0 - prob + eps)


def _cosine(u, v) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def finetune_loss(
    pos_features: list[CandidateFeature],
    neg_features: list[CandidateFeature],
    params: Params,
    lambda_weight: float,
    tau: float,
) -> float:
    """Lambda-weighted multi-task objective over precomputed features.

    (1-lambda)/2 * (mean positive BCE + mean negative BCE) + lambda * mean
    per-example contrastive softmax over each example's candidate features,
    anchored at the projection of [h_x ; h_x].
    """
    if not (0.0 <= lambda_weight <= 1.0):
        raise ParameterError("lambda must be in [0, 1]")
    if tau <= 0:
        raise ParameterError("tau must be positive")
    if not pos_features:
        raise ParameterError("at least one positive feature is required")
    l_pos = sum(_bce(classify(f.h, params), 1) for f in pos_features) / len(pos_features)
    l_neg = (
        sum(_bce(classify(f.h, params), 0) for f in neg_features) / len(neg_features)
        if neg_features
        else 0.0
    )
    by_example: dict[str, tuple[list[CandidateFeature], list[CandidateFeature]]] = {}
    for f in pos_features:
        by_example.setdefault(f.example_id, ([], []))[0].append(f)
    for f in neg_features:
        by_example.setdefault(f.example_id, ([], []))[1].append(f)
    cl_terms = []
    for ex_id, (pos, neg) in by_example.items():
        if not pos:
            continue
        anchor = project(np.concatenate([pos[0].h_x, pos[0].h_x]), params)
        feats = pos + neg
        sims = np.array([_cosine(anchor, project(f.h, params)) for f in feats]) / tau
        m = sims.max()
        logz = m + math.log(np.exp(sims - m).sum())
        for j in range(len(pos)):
            cl_terms.append(logz - sims[j])
    l_cl = sum(cl_terms) / len(cl_terms) if cl_terms else 0.0
    return (1.0 - lambda_weight) / 2.0 * (l_pos + l_neg) + lambda_weight * l_cl


# ---------------------------------------------------------------------------
# Encoding pipeline


def _sentence_sequences(ex: AcronymExample, vocab: Vocabulary, max_seq: int):
    """Token ids for the unmasked sentence and the shared slotted skeleton.

    Returns (raw_ids, span, slotted_ids, slot_position); all sequences carry
    [CLS]/[SEP] and single-segment ids.
    """
    ex = truncate_example(ex, max_seq - 2)
    ids = vocab.encode(ex.tokens)
    start, end = ex.acronym_span
    raw_ids = [CLS_ID, *ids, SEP_ID]
    span = (start + 1, end + 1)
    slotted = [CLS_ID, *ids[:start], MASK_ID, *ids[end:], SEP_ID]
    slot_pos = start + 1
    return raw_ids, span, slotted, slot_pos


@dataclass
class _EncodedBatch:
    """One encoder pass over all sentence/candidate sequences of a batch."""

    hidden: np.ndarray  # (num_seqs, T, d)
    cache: dict
    emb_cache: tuple
    seq_index_x: list[int]  # per example: row of its unmasked sentence
    spans: list[tuple[int, int]]
    seq_index_t: list[list[int]]  # per example: rows of its candidate sequences
    slot_positions: list[int]


def _encode_batch(params: Params, config: EncoderConfig, examples, phrase_ids_per_example,
                  vocab: Vocabulary, train: bool, rng) -> _EncodedBatch:
    seqs: list[list[int]] = []
    slots: list[list[tuple[int, tuple[int, ...]]]] = []
    seq_index_x, spans, seq_index_t, slot_positions = [], [], [], []
    for ex, phrase_ids in zip(examples, phrase_ids_per_example):
        raw_ids, span, slotted, slot_pos = _sentence_sequences(
            ex, vocab, config.max_sequence_length
        )
        seq_index_x.append(len(seqs))
        spans.append(span)
        seqs.append(raw_ids)
        slots.append([])
        rows = []
        for ids in phrase_ids:
            rows.append(len(seqs))
            seqs.append(slotted)
            slots.append([(slot_pos, ids)])
        seq_index_t.append(rows)
        slot_positions.append(slot_pos)
    T = max(len(s) for s in seqs)
    ids_arr = np.zeros((len(seqs), T), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids_arr[i, : len(s)] = s
    segs_arr = np.zeros_like(ids_arr)
    mask = (np.arange(T)[None, :] < np.array([len(s) for s in seqs])[:, None]).astype(np.float64)
    emb, emb_cache = embed_batch(params, config, ids_arr, segs_arr, slots)
    hidden, cache = encoder_forward(params, config, emb, mask, train=train, rng=rng)
    if not np.all(np.isfinite(hidden)):
        raise NumericalError("non-finite hidden states during fine-tuning")
    return _EncodedBatch(hidden, cache, emb_cache, seq_index_x, spans, seq_index_t, slot_positions)


def candidate_feature(
    ex: AcronymExample,
    candidate_phrase: str,
    bundle: ModelBundle,
    dictionary: Dictionary,
) -> CandidateFeature:
    """Feature [h_x ; h_T] for one (example, candidate) pair, eval mode."""
    if candidate_phrase not in dictionary.candidates(ex.short_form):
        raise ValidationError(
            f"{candidate_phrase!r} is not a candidate of {ex.short_form!r}"
        )
    phrase_ids = tuple(bundle.vocab.encode(candidate_phrase.split()))
    enc = _encode_batch(
        bundle.params, bundle.config, [ex], [[phrase_ids]], bundle.vocab, False, None
    )
    h_x = _span_mean(enc.hidden[enc.seq_index_x[0]], enc.spans[0])
    h_t = enc.hidden[enc.seq_index_t[0][0], enc.slot_positions[0]]
    label = None
    if ex.is_labeled:
        label = POSITIVE if candidate_phrase == ex.gold_long_form else NEGATIVE
    return CandidateFeature(example_id=ex.id, h_x=h_x, h_t=h_t, label=label)


def _span_mean(hidden_seq: np.ndarray, span: tuple[int, int]) -> np.ndarray:
    start, end = span
    return hidden_seq[start:end].mean(0)


# ---------------------------------------------------------------------------
# Full training objective with gradients


def finetune_batch_loss_and_grads(
    params: Params,
    config: EncoderConfig,
    batch: list[tuple[AcronymExample, CandidateSet]],
    vocab: Vocabulary,
    lambda_weight: float,
    tau: float,
    train: bool = False,
    rng: np.random.Generator | None = None,
    compute_grads: bool = True,
):
    """Full fine-tuning objective over a batch, with gradients for every
    parameter tensor (encoder and heads)."""
    if not (0.0 <= lambda_weight <= 1.0):
        raise ParameterError("lambda must be in [0, 1]")
    if tau <= 0:
        raise ParameterError("tau must be positive")
    if not batch:
        raise ParameterError("batch must be nonempty")
    examples = [ex for ex, _ in batch]
    phrase_ids_per_example = []
    for ex, cand in batch:
        ids = [tuple(vocab.encode(cand.positive.split()))]
        ids += [tuple(vocab.encode(p.split())) for p in cand.negatives]
        phrase_ids_per_example.append(ids)
    enc = _encode_batch(params, config, examples, phrase_ids_per_example, vocab, train, rng)

    d = config.hidden_dim
    B = len(batch)
    n_pos = B
    n_neg = sum(len(c.negatives) for _, c in batch)

    # gather h_x / h_T and head forward
    h_x_list = [
        _span_mean(enc.hidden[enc.seq_index_x[b]], enc.spans[b]) for b in range(B)
    ]
    feats: list[dict] = []  # per (b, c): concatenated feature + bookkeeping
    for b, (ex, cand) in enumerate(batch):
        for c, row in enumerate(enc.seq_index_t[b]):
            h_t = enc.hidden[row, enc.slot_positions[b]]
            feats.append(
                {
                    "b": b,
                    "c": c,
                    "row": row,
                    "h": np.concatenate([h_x_list[b], h_t]),
                    "label": 1 if c == 0 else 0,
                }
            )

    w1, w2 = params["proj_w1"], params["proj_w2"]
    cls_w, cls_b = params["cls_w"], params["cls_b"]

    l_pos = l_neg = 0.0
    for f in feats:
        logit = f["h"] @ cls_w + cls_b
        prob = 1.0 / (1.0 + np.exp(-logit))
        f["prob"] = prob
        bce = -np.log(prob + 1e-300) if f["label"] == 1 else -np.log(1.0 - prob + 1e-300)
        if f["label"] == 1:
            l_pos += bce
        else:
            l_neg += bce
    l_pos /= n_pos
    l_neg = l_neg / n_neg if n_neg else 0.0

    # projections
    for f in feats:
        f["u"] = f["h"] @ w1
        f["a"] = np.maximum(f["u"], 0.0)
        f["z"] = f["a"] @ w2
    anchors = []
    for b in range(B):
        ha = np.concatenate([h_x_list[b], h_x_list[b]])
        u = ha @ w1
        a = np.maximum(u, 0.0)
        anchors.append({"h": ha, "u": u, "a": a, "z": a @ w2})

    feats_by_b: list[list[dict]] = [[] for _ in range(B)]
    for f in feats:
        feats_by_b[f["b"]].append(f)
    l_cl = 0.0
    cl_cache = []
    for b in range(B):
        za = anchors[b]["z"]
        sims = np.array([_cosine(za, f["z"]) for f in feats_by_b[b]])
        t = sims / tau
        m = t.max()
        logz = m + np.log(np.exp(t - m).sum())
        probs = np.exp(t - logz)
        l_cl += float(logz - t[0])  # positive candidate is index 0
        cl_cache.append(probs)
    l_cl /= B

    loss = (1.0 - lambda_weight) / 2.0 * (l_pos + l_neg) + lambda_weight * l_cl
    if not math.isfinite(loss):
        raise NumericalError("non-finite fine-tuning loss")
    if not compute_grads:
        return loss, None, {"l_pos": l_pos, "l_neg": l_neg, "l_cl": l_cl}

    grads: Params = {
        "proj_w1": np.zeros_like(w1),
        "proj_w2": np.zeros_like(w2),
        "cls_w": np.zeros_like(cls_w),
        "cls_b": np.zeros_like(cls_b),
    }
    d_h = [np.zeros(2 * d) for _ in feats]
    d_anchor_h = [np.zeros(2 * d) for _ in range(B)]

    # classification path
    ce_scale = (1.0 - lambda_weight) / 2.0
    for j, f in enumerate(feats):
        denom = n_pos if f["label"] == 1 else n_neg
        d_logit = ce_scale * (f["prob"] - f["label"]) / denom
        grads["cls_w"] += d_logit * f["h"]
        grads["cls_b"] += np.asarray(d_logit)
        d_h[j] += d_logit * cls_w

    # contrastive path
    d_z = [np.zeros_like(feats[0]["z"]) for _ in feats]
    d_z_anchor = [np.zeros(w2.shape[1]) for _ in range(B)]
    feat_pos_in_list = {}
    for j, f in enumerate(feats):
        feat_pos_in_list[(f["b"], f["c"])] = j
    cl_scale = lambda_weight / B
    for b in range(B):
        za = anchors[b]["z"]
        probs = cl_cache[b]
        for c, f in enumerate(feats_by_b[b]):
            coef = (probs[c] - (1.0 if c == 0 else 0.0)) / tau * cl_scale
            if coef == 0.0:
                continue
            j = feat_pos_in_list[(b, f["c"])]
            d_z_anchor[b] += coef * cosine_grad_u(za, f["z"])
            d_z[j] += coef * cosine_grad_u(f["z"], za)

    # projection backward
    for j, f in enumerate(feats):
        if np.any(d_z[j]):
            da = d_z[j] @ w2.T
            grads["proj_w2"] += np.outer(f["a"], d_z[j])
            du = da * (f["u"] > 0)
            grads["proj_w1"] += np.outer(f["h"], du)
            d_h[j] += du @ w1.T
    for b in range(B):
        if np.any(d_z_anchor[b]):
            da = d_z_anchor[b] @ w2.T
            grads["proj_w2"] += np.outer(anchors[b]["a"], d_z_anchor[b])
            du = da * (anchors[b]["u"] > 0)
            grads["proj_w1"] += np.outer(anchors[b]["h"], du)
            d_anchor_h[b] += du @ w1.T

    # scatter into hidden-state gradients
    d_hidden = np.zeros_like(enc.hidden)
    d_h_x = [np.zeros(d) for _ in range(B)]
    for j, f in enumerate(feats):
        d_h_x[f["b"]] += d_h[j][:d]
        d_hidden[f["row"], enc.slot_positions[f["b"]]] += d_h[j][d:]
    for b in range(B):
        d_h_x[b] += d_anchor_h[b][:d] + d_anchor_h[b][d:]
        start, end = enc.spans[b]
        d_hidden[enc.seq_index_x[b], start:end] += d_h_x[b] / (end - start)

    enc_grads, d_emb = encoder_backward(d_hidden, enc.cache, params, config)
    for k, v in enc_grads.items():
        grads[k] = grads[k] + v if k in grads else v
    emb_grads = embed_backward(d_emb, enc.emb_cache, params)
    for k, v in emb_grads.items():
        grads[k] = grads[k] + v if k in grads else v
    for name in params:
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    return loss, grads, {"l_pos": l_pos, "l_neg": l_neg, "l_cl": l_cl}


# ---------------------------------------------------------------------------
# Training loop and inference


def run_finetuning(
    bundle: ModelBundle,
    train_examples: list[AcronymExample],
    dev_examples: list[AcronymExample],
    dictionary: Dictionary,
    config: FinetuneConfig,
    log_path: str | Path | None = None,
) -> tuple[ModelBundle, list[dict]]:
    """Fine-tune the pre-trained student; keeps the best-dev-F1 parameters."""
    labeled = [ex for ex in train_examples if ex.is_labeled]
    if not labeled and config.epochs > 0:
        raise ValidationError("fine-tuning needs labeled training data")
    params: Params = {k: v.copy() for k, v in bundle.params.items()}
    head_keys_present = all(k in params for k in HEAD_PARAM_NAMES)
    if not head_keys_present:
        params.update(
            init_head_params(bundle.config, config, derive_seed(config.seed, "head"))
        )
    candidate_sets = {
        ex.id: sample_candidates(
            ex, dictionary, config.negatives, derive_seed(config.seed, f"cand:{ex.id}")
        )
        for ex in labeled
    }
    optimizer = AdamW(weight_decay=config.weight_decay)
    order_rng = random.Random(derive_seed(config.seed, "order"))
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    steps_per_epoch = max(1, math.ceil(len(labeled) / config.batch_size)) if labeled else 1
    total_steps = config.epochs * steps_per_epoch
    log: list[dict] = []
    best_params = {k: v.copy() for k, v in params.items()}
    best_f1 = -1.0
    step = 0
    for epoch in range(config.epochs):
        order = list(range(len(labeled)))
        order_rng.shuffle(order)
        epoch_losses = []
        lr = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            batch = [(labeled[i], candidate_sets[labeled[i].id]) for i in chunk]
            lr = warmup_epoch_anneal(
                step, steps_per_epoch * max(1, config.warmup_epochs), total_steps,
                config.lr_start, config.lr_end,
            )
            loss, grads, _ = finetune_batch_loss_and_grads(
                params, bundle.config, batch, bundle.vocab,
                config.lambda_weight, config.tau, train=True, rng=dropout_rng,
            )
            optimizer.step(params, grads, lr)
            epoch_losses.append(loss)
            step += 1
        entry = {
            "epoch": epoch,
            "mean_loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0,
            "lr": lr,
        }
        if dev_examples:
            trial = ModelBundle(config=bundle.config, params=params, vocab=bundle.vocab)
            preds = {
                sc.example_id: sc.predicted for sc in predict_all(dev_examples, dictionary, trial)
            }
            gold = {ex.id: ex.gold_long_form for ex in dev_examples if ex.is_labeled}
            report = macro_metrics(preds, gold)
            entry["dev_macro_f1"] = report.macro_f1
            if report.macro_f1 > best_f1:
                best_f1 = report.macro_f1
                best_params = {k: v.copy() for k, v in params.items()}
        else:
            best_params = params
        log.append(entry)
    if config.epochs == 0 or not dev_examples:
        best_params = params
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return ModelBundle(config=bundle.config, params=best_params, vocab=bundle.vocab), log


def predict(ex: AcronymExample, dictionary: Dictionary, bundle: ModelBundle) -> ScoredCandidates:
    """Score every candidate of the example's short form; argmax with ties
    broken by candidate order."""
    return predict_all([ex], dictionary, bundle)[0]


def predict_all(
    examples: list[AcronymExample],
    dictionary: Dictionary,
    bundle: ModelBundle,
    batch_size: int = 64,
) -> list[ScoredCandidates]:
    if not all(k in bundle.params for k in HEAD_PARAM_NAMES):
        raise ValidationError("model has no classification head; fine-tune first")
    out: list[ScoredCandidates] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        cand_lists = [dictionary.candidates(ex.short_form) for ex in chunk]
        phrase_ids = [
            [tuple(bundle.vocab.encode(p.split())) for p in cands] for cands in cand_lists
        ]
        enc = _encode_batch(
            bundle.params, bundle.config, chunk, phrase_ids, bundle.vocab, False, None
        )
        for b, ex in enumerate(chunk):
            h_x = _span_mean(enc.hidden[enc.seq_index_x[b]], enc.spans[b])
            scores = []
            for c, cand in enumerate(cand_lists[b]):
                h_t = enc.hidden[enc.seq_index_t[b][c], enc.slot_positions[b]]
                prob = classify(np.concatenate([h_x, h_t]), bundle.params)
                scores.append((cand, prob))
            out.append(ScoredCandidates(example_id=ex.id, scores=scores))
    return out


def save_predictions(scored: list[ScoredCandidates], path: str | Path) -> None:
    records = [{"id": sc.example_id, "label": sc.predicted} for sc in scored]
    Path(path).write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")


def save_probabilities(scored: list[ScoredCandidates], path: str | Path) -> None:
    table = {sc.example_id: {cand: p for cand, p in sc.scores} for sc in scored}
    Path(path).write_text(json.dumps(table, indent=2) + "\n")
