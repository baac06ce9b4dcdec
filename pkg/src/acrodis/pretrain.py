"""Phrase-level contrastive continual pre-training with a frozen teacher.

The student sees the sentence with its acronym span collapsed to a single
[MASK]; the frozen teacher sees the same sentence with the span collapsed to a
phrase-averaged slot for each candidate long form.  The contrastive loss pulls
the student's mask-position representation toward the teacher's gold-phrase
representation at the same position and pushes it away from every other
teacher position and from the negative candidates' slot representations.

Phase 1 optimizes contrastive + MLM + NSP; phase 2 optimizes MLM + NSP only.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import (
    MASK_ID,
    CLS_ID,
    SEP_ID,
    UNK_ID,
    AcronymExample,
    CandidateSet,
    Dictionary,
    Vocabulary,
    build_vocabulary,
    sample_candidates,
    tokenize,
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
    init_encoder_params,
    mlm_head_backward,
    mlm_head_forward,
    params_hash,
)
from .errors import NumericalError, ParameterError, ValidationError
from .optim import AdamW, warmup_linear_decay
from .seeding import derive_seed


# ---------------------------------------------------------------------------
# Input construction


@dataclass
class MlmPolicy:
    """Standard MLM masking: each eligible token independently with ``rate``,
    then 80/10/10 mask / random / keep."""

    rate: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1


@dataclass
class MaskedSequence:
    """Student-side sentence: acronym span collapsed to one [MASK] slot."""

    token_ids: list[int]
    mask_position: int
    mlm_targets: list[tuple[int, int]]  # (position, original id); never the slot
    nsp_label: int | None = None


@dataclass
class TeacherInputs:
    """Teacher-side sentences: same tokens, span collapsed to a phrase slot.

    All candidate sequences share ``token_ids`` (with a placeholder at the
    slot); they differ only in which phrase fills the slot.
    """

    token_ids: list[int]
    slot_position: int
    positive_phrase_ids: tuple[int, ...]
    negative_phrase_ids: list[tuple[int, ...]]

    @property
    def positive_sequence(self) -> tuple[list[int], tuple[int, tuple[int, ...]]]:
        return self.token_ids, (self.slot_position, self.positive_phrase_ids)

    @property
    def negative_sequences(self) -> list[tuple[list[int], tuple[int, tuple[int, ...]]]]:
        return [(self.token_ids, (self.slot_position, ids)) for ids in self.negative_phrase_ids]


def _collapse_span(ids: list[int], span: tuple[int, int], fill_id: int) -> tuple[list[int], int]:
    start, end = span
    return ids[:start] + [fill_id] + ids[end:], start


def build_student_input(
    ex: AcronymExample,
    vocab: Vocabulary,
    mlm_policy: MlmPolicy | None,
    seed: int,
) -> MaskedSequence:
    """Collapse the acronym span to a single [MASK]; apply MLM masking to the
    remaining positions per ``mlm_policy`` (None disables it)."""
    ids = vocab.encode(ex.tokens)
    ids, pos = _collapse_span(ids, ex.acronym_span, MASK_ID)
    targets: list[tuple[int, int]] = []
    if mlm_policy is not None and mlm_policy.rate > 0:
        rng = random.Random(seed)
        for p in range(len(ids)):
            if p == pos:
                continue
            if rng.random() >= mlm_policy.rate:
                continue
            original = ids[p]
            targets.append((p, original))
            action = rng.random()
            if action < mlm_policy.mask_prob:
                ids[p] = MASK_ID
            elif action < mlm_policy.mask_prob + mlm_policy.random_prob:
                ids[p] = rng.randrange(5, vocab.size) if vocab.size > 5 else UNK_ID
            # else: keep the original token
    return MaskedSequence(token_ids=ids, mask_position=pos, mlm_targets=targets)


def _phrase_ids(phrase: str, vocab: Vocabulary) -> tuple[int, ...]:
    ids = tuple(vocab.encode(tokenize(phrase)))
    if not ids or all(i == UNK_ID for i in ids):
        raise ValidationError(f"candidate phrase {phrase!r} has no in-vocabulary tokens")
    return ids


def build_teacher_inputs(
    ex: AcronymExample,
    candidates: CandidateSet,
    vocab: Vocabulary,
) -> TeacherInputs:
    """One positive and ``len(negatives)`` negative sequences, all aligned with
    the student's masked sequence (same length, same slot position)."""
    if candidates.positive is None:
        raise ValidationError("candidate set has no positive phrase")
    ids = vocab.encode(ex.tokens)
    ids, pos = _collapse_span(ids, ex.acronym_span, MASK_ID)
    return TeacherInputs(
        token_ids=ids,
        slot_position=pos,
        positive_phrase_ids=_phrase_ids(candidates.positive, vocab),
        negative_phrase_ids=[_phrase_ids(p, vocab) for p in candidates.negatives],
    )


# ---------------------------------------------------------------------------
# Losses


def contrastive_loss_from_similarities(pos_sims, neg_sims, numerator_index: int, tau: float):
    """Temperature-scaled softmax loss over similarity terms.

    Denominator terms are all ``pos_sims`` entries (one per teacher position)
    plus all ``neg_sims`` entries (one per negative candidate); the numerator
    is ``pos_sims[numerator_index]``.  Returns (loss, softmax probabilities).
    """
    if tau <= 0:
        raise ParameterError("tau must be positive")
    pos_arr = np.asarray(pos_sims, dtype=np.float64).ravel()
    if not (0 <= numerator_index < len(pos_arr)):
        raise ParameterError("numerator index must point into the positive terms")
    terms = np.concatenate([pos_arr, np.asarray(neg_sims, dtype=np.float64).ravel()]) / tau
    m = terms.max()
    logz = m + math.log(np.exp(terms - m).sum())
    probs = np.exp(terms - logz)
    return float(logz - terms[numerator_index]), probs


def _row_cosines(vec: np.ndarray, rows: np.ndarray) -> np.ndarray:
    nv = np.linalg.norm(vec)
    norms = np.linalg.norm(rows, axis=1)
    sims = np.zeros(rows.shape[0])
    if nv == 0.0:
        return sims
    ok = norms > 0.0
    sims[ok] = rows[ok] @ vec / (norms[ok] * nv)
    return sims


def contrastive_pretrain_loss(
    student_h,
    teacher_pos_h,
    neg_mask_reprs,
    i: int,
    tau: float,
) -> float:
    """Phrase-level contrastive loss for one example.

    ``student_h`` and ``teacher_pos_h`` are (n, d) hidden-state matrices;
    ``neg_mask_reprs`` holds the negative candidates' slot-position vectors.
    """
    if tau <= 0:
        raise ParameterError("tau must be positive")
    sh = np.asarray(getattr(student_h, "matrix", student_h), dtype=np.float64)
    th = np.asarray(getattr(teacher_pos_h, "matrix", teacher_pos_h), dtype=np.float64)
    if sh.shape != th.shape:
        raise ParameterError("student and positive-teacher hidden states must align")
    if not (0 <= i < sh.shape[0]):
        raise ParameterError(f"mask position {i} out of range")
    vec = sh[i]
    pos_sims = _row_cosines(vec, th)
    negs = np.asarray(neg_mask_reprs, dtype=np.float64).reshape(len(neg_mask_reprs), -1) \
        if len(neg_mask_reprs) else np.zeros((0, sh.shape[1]))
    neg_sims = _row_cosines(vec, negs)
    loss, _ = contrastive_loss_from_similarities(pos_sims, neg_sims, i, tau)
    return loss


def _contrastive_grad(vec, pos_rows, neg_rows, i, tau):
    """Loss and d(loss)/d(student mask vector) for one example."""
    rows = np.vstack([pos_rows, neg_rows]) if len(neg_rows) else np.asarray(pos_rows)
    sims_pos = _row_cosines(vec, np.asarray(pos_rows))
    sims_neg = _row_cosines(vec, np.asarray(neg_rows)) if len(neg_rows) else np.zeros(0)
    loss, probs = contrastive_loss_from_similarities(sims_pos, sims_neg, i, tau)
    coef = probs.copy()
    coef[i] -= 1.0
    coef /= tau
    dvec = np.zeros_like(vec)
    for r in range(rows.shape[0]):
        if coef[r] != 0.0:
            dvec += coef[r] * cosine_grad_u(vec, rows[r])
    return loss, dvec


def mlm_loss(logits, target_ids) -> float:
    """Mean softmax cross-entropy over masked positions; 0 with no positions."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        return 0.0
    targets = np.asarray(target_ids, dtype=np.int64)
    m = logits.max(-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(-1, keepdims=True))).ravel()
    picked = logits[np.arange(len(targets)), targets]
    return float((lse - picked).mean())


def _mlm_loss_grad(logits, target_ids):
    n = logits.shape[0]
    m = logits.max(-1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(-1, keepdims=True)
    d = probs.copy()
    d[np.arange(n), target_ids] -= 1.0
    return d / n


def nsp_loss(logit: float, label: int) -> float:
    """Numerically stable binary cross-entropy with a logit input."""
    if label not in (0, 1):
        raise ParameterError("NSP label must be 0 or 1")
    l = float(logit)
    return max(l, 0.0) - l * label + math.log1p(math.exp(-abs(l)))


@dataclass(frozen=True)
class PretrainLossBreakdown:
    l_cl: float
    l_mlm: float
    l_nsp: float
    total: float

    @classmethod
    def from_parts(cls, l_cl: float, l_mlm: float, l_nsp: float) -> "PretrainLossBreakdown":
        total = (l_cl + l_mlm) + l_nsp  # fixed accumulation order
        if not math.isfinite(total):
            raise NumericalError(
                f"non-finite loss parts: cl={l_cl} mlm={l_mlm} nsp={l_nsp}"
            )
        return cls(l_cl, l_mlm, l_nsp, total)


def total_pretrain_loss(parts: PretrainLossBreakdown) -> float:
    """Exact unweighted sum of the three parts, in a fixed order."""
    total = (parts.l_cl + parts.l_mlm) + parts.l_nsp
    if not math.isfinite(total):
        raise NumericalError("non-finite pre-training loss")
    return total


# ---------------------------------------------------------------------------
# Batch assembly


@dataclass
class PretrainInstance:
    student_ids: list[int]
    teacher_ids: list[int]
    segment_ids: list[int]
    mask_position: int
    mlm_positions: list[int]
    mlm_target_ids: list[int]
    nsp_label: int
    positive_phrase_ids: tuple[int, ...]
    negative_phrase_ids: list[tuple[int, ...]]

    @property
    def length(self) -> int:
        return len(self.student_ids)


def _truncate_around(ids: list[int], center: int, max_len: int) -> tuple[int, int]:
    """Window [start, end) of size max_len containing ``center``."""
    n = len(ids)
    if n <= max_len:
        return 0, n
    start = center - max_len // 2
    start = max(0, min(start, n - max_len))
    start = min(start, center)
    start = max(start, center + 1 - max_len)
    return start, start + max_len


def build_pretrain_instance(
    ex: AcronymExample,
    b_tokens: list[str],
    nsp_label: int,
    candidates: CandidateSet,
    vocab: Vocabulary,
    mlm_policy: MlmPolicy | None,
    max_sequence_length: int,
    seed: int,
) -> PretrainInstance:
    """Assemble [CLS] A [SEP] B [SEP] student/teacher inputs for one example."""
    student = build_student_input(ex, vocab, mlm_policy, seed)
    teacher = build_teacher_inputs(ex, candidates, vocab)
    a_ids = student.token_ids
    t_ids = teacher.token_ids
    pos = student.mask_position
    targets = student.mlm_targets
    a_budget = max_sequence_length - 4  # CLS, SEP, >=1 B token, SEP
    if len(a_ids) > a_budget:
        w0, w1 = _truncate_around(a_ids, pos, a_budget)
        a_ids = a_ids[w0:w1]
        t_ids = t_ids[w0:w1]
        targets = [(p - w0, t) for p, t in targets if w0 <= p < w1]
        pos -= w0
    b_budget = max_sequence_length - 3 - len(a_ids)
    b_ids = vocab.encode(b_tokens)[: max(1, b_budget)]
    student_ids = [CLS_ID, *a_ids, SEP_ID, *b_ids, SEP_ID]
    teacher_ids = [CLS_ID, *t_ids, SEP_ID, *b_ids, SEP_ID]
    segment_ids = [0] * (len(a_ids) + 2) + [1] * (len(b_ids) + 1)
    shift = 1
    return PretrainInstance(
        student_ids=student_ids,
        teacher_ids=teacher_ids,
        segment_ids=segment_ids,
        mask_position=pos + shift,
        mlm_positions=[p + shift for p, _ in targets],
        mlm_target_ids=[t for _, t in targets],
        nsp_label=nsp_label,
        positive_phrase_ids=teacher.positive_phrase_ids,
        negative_phrase_ids=teacher.negative_phrase_ids,
    )


def _pad_batch(seqs: list[list[int]], T: int) -> np.ndarray:
    out = np.zeros((len(seqs), T), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def pretrain_batch_loss_and_grads(
    student: Params,
    teacher: Params,
    config: EncoderConfig,
    instances: list[PretrainInstance],
    tau: float,
    include_cl: bool,
    train: bool = False,
    rng: np.random.Generator | None = None,
    compute_grads: bool = True,
):
    """Forward (and optionally backward) pass for one pre-training batch.

    Returns ``(breakdown, grads)``; ``grads`` is None when ``compute_grads``
    is false.  The teacher is only ever read.
    """
    if not instances:
        raise ParameterError("batch must be nonempty")
    B = len(instances)
    T = max(inst.length for inst in instances)
    student_ids = _pad_batch([inst.student_ids for inst in instances], T)
    segment_ids = _pad_batch([inst.segment_ids for inst in instances], T)
    mask = (np.arange(T)[None, :] < np.array([inst.length for inst in instances])[:, None]).astype(np.float64)

    s_emb, s_emb_cache = embed_batch(student, config, student_ids, segment_ids, [[] for _ in range(B)])
    s_hidden, s_cache = encoder_forward(student, config, s_emb, mask, train=train, rng=rng)
    if not np.all(np.isfinite(s_hidden)):
        raise NumericalError("non-finite student hidden states")

    l_cl = 0.0
    cl_grads = [None] * B
    if include_cl:
        # one teacher forward over positives and all negatives together
        t_seqs, t_segs, t_slots, owners = [], [], [], []
        for b, inst in enumerate(instances):
            t_seqs.append(inst.teacher_ids)
            t_segs.append(inst.segment_ids)
            t_slots.append([(inst.mask_position, inst.positive_phrase_ids)])
            owners.append((b, -1))
        for b, inst in enumerate(instances):
            for m, ids in enumerate(inst.negative_phrase_ids):
                t_seqs.append(inst.teacher_ids)
                t_segs.append(inst.segment_ids)
                t_slots.append([(inst.mask_position, ids)])
                owners.append((b, m))
        t_ids_arr = _pad_batch(t_seqs, T)
        t_segs_arr = _pad_batch(t_segs, T)
        t_mask = (np.arange(T)[None, :] < np.array([len(s) for s in t_seqs])[:, None]).astype(np.float64)
        t_emb, _ = embed_batch(teacher, config, t_ids_arr, t_segs_arr, t_slots)
        t_hidden, _ = encoder_forward(teacher, config, t_emb, t_mask, train=False)
        if not np.all(np.isfinite(t_hidden)):
            raise NumericalError("non-finite teacher hidden states")
        neg_reprs: list[list[np.ndarray]] = [[] for _ in range(B)]
        for row, (b, m) in enumerate(owners):
            if m >= 0:
                neg_reprs[b].append(t_hidden[row, instances[b].mask_position])
        for b, inst in enumerate(instances):
            n = inst.length
            vec = s_hidden[b, inst.mask_position]
            loss_b, dvec = _contrastive_grad(
                vec, t_hidden[b, :n], np.asarray(neg_reprs[b]).reshape(len(neg_reprs[b]), -1),
                inst.mask_position, tau,
            )
            l_cl += loss_b
            cl_grads[b] = dvec
        l_cl /= B

    flat_positions = [(b, p) for b, inst in enumerate(instances) for p in inst.mlm_positions]
    flat_targets = np.array(
        [t for inst in instances for t in inst.mlm_target_ids], dtype=np.int64
    )
    if flat_positions:
        rows = np.array([b for b, _ in flat_positions])
        cols = np.array([p for _, p in flat_positions])
        hsel = s_hidden[rows, cols]
        logits, mlm_cache = mlm_head_forward(student, hsel)
        l_mlm = mlm_loss(logits, flat_targets)
    else:
        l_mlm = 0.0

    nsp_labels = np.array([inst.nsp_label for inst in instances], dtype=np.float64)
    nsp_logits = s_hidden[:, 0] @ student["nsp_w"] + student["nsp_b"]
    l_nsp = float(
        np.mean(
            np.maximum(nsp_logits, 0.0)
            - nsp_logits * nsp_labels
            + np.log1p(np.exp(-np.abs(nsp_logits)))
        )
    )

    breakdown = PretrainLossBreakdown.from_parts(l_cl, l_mlm, l_nsp)
    if not compute_grads:
        return breakdown, None

    d_hidden = np.zeros_like(s_hidden)
    if include_cl:
        for b, inst in enumerate(instances):
            d_hidden[b, inst.mask_position] += cl_grads[b] / B
    grads: Params = {}
    if flat_positions:
        d_logits = _mlm_loss_grad(logits, flat_targets)
        head_grads, d_hsel = mlm_head_backward(d_logits, mlm_cache, student)
        grads.update(head_grads)
        np.add.at(d_hidden, (rows, cols), d_hsel)
    d_nsp_logits = (1.0 / (1.0 + np.exp(-nsp_logits)) - nsp_labels) / B
    grads["nsp_w"] = s_hidden[:, 0].T @ d_nsp_logits
    grads["nsp_b"] = np.asarray(d_nsp_logits.sum())
    d_hidden[:, 0] += d_nsp_logits[:, None] * student["nsp_w"]

    enc_grads, d_emb = encoder_backward(d_hidden, s_cache, student, config)
    grads.update(enc_grads)
    emb_grads = embed_backward(d_emb, s_emb_cache, student)
    for k, v in emb_grads.items():
        grads[k] = grads[k] + v if k in grads else v
    return breakdown, grads


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class PretrainConfig:
    steps_phase1: int
    steps_phase2: int
    batch_size: int = 32
    tau: float = 0.02
    lr: float = 1e-4
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    seed: int = 0
    negatives: int = 2
    mlm_rate: float = 0.15

    def __post_init__(self):
        if self.steps_phase1 < 0 or self.steps_phase2 < 0:
            raise ParameterError("step counts must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.tau <= 0:
            raise ParameterError("tau must be positive")

    @property
    def total_steps(self) -> int:
        return self.steps_phase1 + self.steps_phase2


@dataclass
class PretrainState:
    config: PretrainConfig
    encoder_config: EncoderConfig
    vocab: Vocabulary
    student: Params
    teacher: Params
    optimizer: AdamW
    dropout_rng: np.random.Generator
    step: int = 0
    log: list[dict] = field(default_factory=list)
    initial_teacher_hash: str = ""

    def __post_init__(self):
        if not self.initial_teacher_hash:
            self.initial_teacher_hash = params_hash(self.teacher)

    @property
    def in_phase1(self) -> bool:
        return self.step < self.config.steps_phase1


def init_pretrain_state(
    config: PretrainConfig,
    encoder_config: EncoderConfig,
    vocab: Vocabulary,
) -> PretrainState:
    student = init_encoder_params(
        encoder_config, np.random.default_rng(derive_seed(config.seed, "init"))
    )
    teacher = {k: v.copy() for k, v in student.items()}
    return PretrainState(
        config=config,
        encoder_config=encoder_config,
        vocab=vocab,
        student=student,
        teacher=teacher,
        optimizer=AdamW(weight_decay=config.weight_decay),
        dropout_rng=np.random.default_rng(derive_seed(config.seed, "dropout")),
    )


def pretrain_step(state: PretrainState, batch: list[PretrainInstance]) -> PretrainState:
    """One optimizer step on the student; the teacher is never written."""
    if not batch:
        raise ParameterError("batch must be nonempty")
    lr = warmup_linear_decay(
        state.step, max(1, state.config.total_steps), state.config.lr, state.config.warmup_fraction
    )
    breakdown, grads = pretrain_batch_loss_and_grads(
        state.student,
        state.teacher,
        state.encoder_config,
        batch,
        tau=state.config.tau,
        include_cl=state.in_phase1,
        train=True,
        rng=state.dropout_rng,
    )
    state.optimizer.step(state.student, grads, lr)
    state.log.append(
        {
            "step": state.step,
            "l_cl": breakdown.l_cl,
            "l_mlm": breakdown.l_mlm,
            "l_nsp": breakdown.l_nsp,
            "total": breakdown.total,
            "lr": lr,
        }
    )
    state.step += 1
    return state


class _InstanceStream:
    """Deterministic shuffled cycle over training examples with NSP pairing."""

    def __init__(self, examples, dictionary, vocab, config, max_seq):
        self.examples = examples
        self.dictionary = dictionary
        self.vocab = vocab
        self.config = config
        self.max_seq = max_seq
        self.order_rng = random.Random(derive_seed(config.seed, "order"))
        self.nsp_rng = random.Random(derive_seed(config.seed, "nsp"))
        self.policy = MlmPolicy(rate=config.mlm_rate) if config.mlm_rate > 0 else None
        self.candidate_cache: dict[str, CandidateSet] = {}
        self.queue: list[int] = []
        self.counter = 0

    def _candidates(self, ex) -> CandidateSet:
        if ex.id not in self.candidate_cache:
            self.candidate_cache[ex.id] = sample_candidates(
                ex, self.dictionary, self.config.negatives,
                derive_seed(self.config.seed, f"cand:{ex.id}"),
            )
        return self.candidate_cache[ex.id]

    def next_batch(self, size: int) -> list[PretrainInstance]:
        batch = []
        n = len(self.examples)
        for _ in range(size):
            if not self.queue:
                self.queue = list(range(n))
                self.order_rng.shuffle(self.queue)
            idx = self.queue.pop()
            ex = self.examples[idx]
            if self.nsp_rng.random() < 0.5:
                b_tokens = self.examples[(idx + 1) % n].tokens
                label = 1
            else:
                b_tokens = self.examples[self.nsp_rng.randrange(n)].tokens
                label = 0
            self.counter += 1
            batch.append(
                build_pretrain_instance(
                    ex, b_tokens, label, self._candidates(ex), self.vocab,
                    self.policy, self.max_seq,
                    derive_seed(self.config.seed, f"mlm:{self.counter}:{ex.id}"),
                )
            )
        return batch


def run_pretraining(
    config: PretrainConfig,
    examples: list[AcronymExample],
    dictionary: Dictionary,
    encoder_config: EncoderConfig | None = None,
    vocab: Vocabulary | None = None,
    log_path: str | Path | None = None,
) -> tuple[ModelBundle, list[dict]]:
    """Two-phase continual pre-training; returns the student bundle and the
    per-step loss log."""
    labeled = [ex for ex in examples if ex.is_labeled]
    if not labeled:
        raise ValidationError("pre-training needs labeled examples")
    if vocab is None:
        vocab = build_vocabulary(examples, dictionary, min_freq=1)
    if encoder_config is None:
        encoder_config = EncoderConfig(vocab_size=vocab.size)
    elif encoder_config.vocab_size != vocab.size:
        encoder_config = replace(encoder_config, vocab_size=vocab.size)
    state = init_pretrain_state(config, encoder_config, vocab)
    stream = _InstanceStream(labeled, dictionary, vocab, config, encoder_config.max_sequence_length)
    for _ in range(config.total_steps):
        pretrain_step(state, stream.next_batch(config.batch_size))
    if params_hash(state.teacher) != state.initial_teacher_hash:
        raise NumericalError("teacher parameters changed during pre-training")
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry in state.log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    bundle = ModelBundle(config=encoder_config, params=state.student, vocab=vocab)
    return bundle, state.log


# ---------------------------------------------------------------------------
# Separation diagnostic


def separation_statistic(
    student: Params,
    teacher: Params,
    config: EncoderConfig,
    examples: list[AcronymExample],
    dictionary: Dictionary,
    vocab: Vocabulary,
    negatives: int = 2,
    seed: int = 0,
) -> float:
    """Mean over examples of S(student mask repr, positive slot repr) minus the
    mean similarity to the negative slot reprs.  Single-sentence inputs, eval
    mode, teacher frozen."""
    values = []
    for ex in examples:
        if not ex.is_labeled:
            continue
        cand = sample_candidates(ex, dictionary, negatives, derive_seed(seed, f"sep:{ex.id}"))
        if not cand.negatives:
            continue
        student_core = build_student_input(ex, vocab, None, 0)
        teacher_core = build_teacher_inputs(ex, cand, vocab)
        s_ids = [CLS_ID, *student_core.token_ids, SEP_ID]
        t_ids = [CLS_ID, *teacher_core.token_ids, SEP_ID]
        segs = [0] * len(s_ids)
        pos = student_core.mask_position + 1
        n = len(s_ids)
        seqs = [s_ids] + [t_ids] * (1 + len(cand.negatives))
        slots = [[]] + [[(pos, teacher_core.positive_phrase_ids)]] + [
            [(pos, ids)] for ids in teacher_core.negative_phrase_ids
        ]
        ids_arr = _pad_batch(seqs, n)
        segs_arr = _pad_batch([segs] * len(seqs), n)
        mask = np.ones((len(seqs), n))
        params_per_row = [student] + [teacher] * (len(seqs) - 1)
        reprs = []
        for row in range(len(seqs)):
            emb, _ = embed_batch(params_per_row[row], config, ids_arr[row : row + 1],
                                 segs_arr[row : row + 1], [slots[row]])
            h, _ = encoder_forward(params_per_row[row], config, emb, mask[row : row + 1])
            reprs.append(h[0, pos])
        svec = reprs[0]
        pos_sim = float(np.dot(svec, reprs[1]) / (np.linalg.norm(svec) * np.linalg.norm(reprs[1])))
        neg_sims = [
            float(np.dot(svec, r) / (np.linalg.norm(svec) * np.linalg.norm(r)))
            for r in reprs[2:]
        ]
        values.append(pos_sim - sum(neg_sims) / len(neg_sims))
    if not values:
        raise ValidationError("no usable examples for the separation statistic")
    return float(np.mean(values))
