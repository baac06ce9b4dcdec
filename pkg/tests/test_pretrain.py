import math
import random

import numpy as np
import pytest

from acrodis.corpus import (
    MASK_ID,
    AcronymExample,
    CandidateSet,
    Dictionary,
    build_vocabulary,
    generate_synthetic,
    sample_candidates,
)
from acrodis.encoder import EncoderConfig, init_encoder_params, params_hash
from acrodis.errors import NumericalError, ParameterError, ValidationError
from acrodis.optim import warmup_linear_decay
from acrodis.pretrain import (
    MlmPolicy,
    PretrainConfig,
    PretrainLossBreakdown,
    build_pretrain_instance,
    build_student_input,
    build_teacher_inputs,
    contrastive_loss_from_similarities,
    contrastive_pretrain_loss,
    init_pretrain_state,
    mlm_loss,
    nsp_loss,
    pretrain_batch_loss_and_grads,
    pretrain_step,
    run_pretraining,
    total_pretrain_loss,
)

from oracle import (
    contrastive_loss_oracle,
    finite_difference_grads,
    softmax_cross_entropy_oracle,
    tensor_rel_error,
)


def _ex(tokens, span, gold=None, ident="e1"):
    return AcronymExample(
        id=ident, tokens=tokens, acronym_span=span,
        short_form=" ".join(tokens[span[0]:span[1]]), gold_long_form=gold,
    )


@pytest.fixture
def vocab():
    tokens = ["the", "svm", "model", "is", "support", "vector", "machines",
              "state", "machine", "alpha", "beta", "runs"]
    d = Dictionary({"svm": ["support vector machines"]})
    return build_vocabulary([_ex(tokens, (1, 2))], d, min_freq=1)


# ---------------------------------------------------------------------------
# Student input


def test_build_student_input_single_token(vocab):
    ex = _ex(["the", "svm", "model"], (1, 2))
    seq = build_student_input(ex, vocab, None, seed=0)
    assert seq.token_ids == vocab.encode(["the", "[MASK]", "model"])
    assert seq.mask_position == 1
    assert seq.mlm_targets == []
    assert seq.nsp_label is None


def test_build_student_input_multitoken_span_collapses(vocab):
    ex = _ex(["the", "support", "vector", "model"], (1, 3))
    seq = build_student_input(ex, vocab, None, seed=0)
    assert len(seq.token_ids) == 3
    assert seq.token_ids[1] == MASK_ID
    assert seq.mask_position == 1


def test_build_student_input_mlm_deterministic_and_rederived(vocab):
    tokens = [f"w{i}" for i in range(100)]
    tokens[40] = "svm"
    ex = _ex(tokens, (40, 41))
    policy = MlmPolicy(rate=0.15)
    seed = 1234
    a = build_student_input(ex, vocab, policy, seed)
    b = build_student_input(ex, vocab, policy, seed)
    assert a == b

    # independently re-derive the masked-position set from the seeded sampler
    ids = vocab.encode(ex.tokens)
    ids = ids[:40] + [MASK_ID] + ids[41:]
    rng = random.Random(seed)
    expected = []
    for p in range(len(ids)):
        if p == 40:
            continue
        if rng.random() >= policy.rate:
            continue
        expected.append((p, ids[p]))
        rng.random()  # the action draw
    assert a.mlm_targets == expected
    assert all(p != a.mask_position for p, _ in a.mlm_targets)


def test_build_student_input_mlm_actions_within_policy(vocab):
    tokens = [f"w{i}" for i in range(60)]
    tokens[10] = "svm"
    ex = _ex(tokens, (10, 11))
    seq = build_student_input(ex, vocab, MlmPolicy(rate=0.3), seed=7)
    for pos, original in seq.mlm_targets:
        current = seq.token_ids[pos]
        assert current == MASK_ID or current == original or 5 <= current < vocab.size


# ---------------------------------------------------------------------------
# Teacher inputs


def test_build_teacher_inputs_alignment(vocab):
    ex = _ex(["the", "svm", "model"], (1, 2), gold="support vector machines")
    cand = CandidateSet("e1", "support vector machines",
                        ["state machine", "alpha beta"], ratio=2)
    student = build_student_input(ex, vocab, None, seed=0)
    teacher = build_teacher_inputs(ex, cand, vocab)
    assert len(teacher.token_ids) == len(student.token_ids)
    assert teacher.slot_position == student.mask_position
    assert teacher.positive_phrase_ids == tuple(
        vocab.encode(["support", "vector", "machines"])
    )
    assert len(teacher.negative_sequences) == 2
    for ids, (slot, phrase) in teacher.negative_sequences:
        assert len(ids) == len(student.token_ids)
        assert slot == student.mask_position


def test_build_teacher_inputs_single_token_candidate(vocab):
    ex = _ex(["the", "svm", "model"], (1, 2), gold="support vector machines")
    cand = CandidateSet("e1", "alpha", [], ratio=0)
    teacher = build_teacher_inputs(ex, cand, vocab)
    assert len(teacher.positive_phrase_ids) == 1


def test_build_teacher_inputs_out_of_vocabulary_phrase(vocab):
    ex = _ex(["the", "svm", "model"], (1, 2), gold="support vector machines")
    cand = CandidateSet("e1", "zzz qqq", [], ratio=0)
    with pytest.raises(ValidationError):
        build_teacher_inputs(ex, cand, vocab)


# ---------------------------------------------------------------------------
# Contrastive loss


def test_cl_loss_single_term_is_zero():
    student = np.array([[1.0, 2.0, 3.0]])
    teacher = np.array([[0.5, -1.0, 2.0]])
    assert contrastive_pretrain_loss(student, teacher, [], 0, tau=0.02) == pytest.approx(0.0)


@pytest.mark.parametrize("n,m", [(1, 1), (3, 2), (5, 4), (2, 0)])
def test_cl_loss_uniform_similarities(n, m):
    base = np.array([0.4, -0.2, 0.9, 0.1])
    student = np.tile(base, (n, 1))
    teacher = np.tile(base * 2.0, (n, 1))  # cosine 1 with every row
    negs = [base * 3.0 for _ in range(m)]
    loss = contrastive_pretrain_loss(student, teacher, negs, i=0, tau=0.5)
    assert loss == pytest.approx(math.log(n + m), abs=1e-9)


def test_cl_loss_ln5_case():
    loss, _ = contrastive_loss_from_similarities(
        np.array([0.3, 0.3, 0.3]), np.array([0.3, 0.3]), 0, tau=0.02
    )
    assert loss == pytest.approx(math.log(5.0), abs=1e-9)


def test_cl_loss_matches_decimal_oracle_fixed_case():
    rng = np.random.default_rng(17)
    d, n, m = 4, 3, 2
    student = rng.normal(size=(n, d))
    teacher = rng.normal(size=(n, d))
    negs = [rng.normal(size=d) for _ in range(m)]
    i = 1
    ours = contrastive_pretrain_loss(student, teacher, negs, i, tau=0.02)
    oracle = contrastive_loss_oracle(student[i], teacher, negs, i, tau=0.02)
    assert abs(ours - oracle) <= 1e-6


def test_cl_loss_oracle_property_sample():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(0, 5))
        d = int(rng.integers(2, 9))
        tau = float(rng.choice([0.02, 1.0]))
        i = int(rng.integers(0, n))
        student = rng.normal(size=(n, d))
        teacher = rng.normal(size=(n, d))
        negs = [rng.normal(size=d) for _ in range(m)]
        ours = contrastive_pretrain_loss(student, teacher, negs, i, tau)
        oracle = contrastive_loss_oracle(student[i], teacher, negs, i, tau)
        assert abs(ours - oracle) <= 1e-6


def test_cl_loss_nonnegative_and_zero_iff_single_term():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(0, 4))
        student = rng.normal(size=(n, 3))
        teacher = rng.normal(size=(n, 3))
        negs = [rng.normal(size=3) for _ in range(m)]
        loss = contrastive_pretrain_loss(student, teacher, negs, 0, tau=0.5)
        if n + m == 1:
            assert loss == pytest.approx(0.0, abs=1e-12)
        else:
            assert loss > 0.0


def test_cl_loss_monotone_in_positive_similarity():
    neg = np.array([0.1, -0.4, 0.25])
    prev = None
    for s in np.linspace(-0.9, 0.9, 13):
        loss, _ = contrastive_loss_from_similarities(
            np.array([s, 0.2, -0.1]), neg, 0, tau=0.1
        )
        if prev is not None:
            assert loss < prev
        prev = loss


def test_cl_loss_tau_validation():
    with pytest.raises(ParameterError):
        contrastive_pretrain_loss(np.zeros((1, 2)), np.zeros((1, 2)), [], 0, tau=0.0)
    with pytest.raises(ParameterError):
        contrastive_loss_from_similarities(np.array([0.1]), np.array([]), 0, tau=-1.0)


def test_cl_loss_shape_mismatch():
    with pytest.raises(ParameterError):
        contrastive_pretrain_loss(np.zeros((2, 3)), np.zeros((3, 3)), [], 0, tau=1.0)


# ---------------------------------------------------------------------------
# MLM / NSP / total


def test_mlm_loss_uniform_logits():
    logits = np.zeros((3, 10))
    assert mlm_loss(logits, [1, 5, 9]) == pytest.approx(math.log(10.0), abs=1e-12)


def test_mlm_loss_sharp_logits_approach_zero():
    logits = np.full((1, 6), -30.0)
    logits[0, 2] = 30.0
    assert mlm_loss(logits, [2]) <= 1e-8


def test_mlm_loss_no_positions():
    assert mlm_loss(np.zeros((0, 7)), []) == 0.0


def test_mlm_loss_matches_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 8))
    targets = rng.integers(0, 8, size=5)
    expected = sum(
        softmax_cross_entropy_oracle(logits[i], int(targets[i])) for i in range(5)
    ) / 5.0
    assert abs(mlm_loss(logits, targets) - expected) <= 1e-9


def test_nsp_loss_values():
    assert nsp_loss(0.0, 0) == pytest.approx(math.log(2.0), abs=1e-12)
    assert nsp_loss(0.0, 1) == pytest.approx(math.log(2.0), abs=1e-12)
    assert nsp_loss(20.0, 1) <= 1e-8
    assert nsp_loss(1.5, 0) == pytest.approx(math.log1p(math.exp(1.5)), abs=1e-12)
    assert nsp_loss(1.5, 0) == pytest.approx(1.7014132779827524, abs=1e-9)
    with pytest.raises(ParameterError):
        nsp_loss(0.0, 2)


def test_total_pretrain_loss():
    assert total_pretrain_loss(PretrainLossBreakdown(0.0, 0.0, 0.0, 0.0)) == 0.0
    parts = PretrainLossBreakdown.from_parts(1.0, 2.0, 0.5)
    assert parts.total == 3.5
    assert total_pretrain_loss(parts) == parts.total  # same accumulation order
    with pytest.raises(NumericalError):
        PretrainLossBreakdown.from_parts(np.inf, 0.0, 0.0)


def test_pretrain_loss_accumulation_bit_stable():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b, c = rng.normal(size=3) ** 2
        parts = PretrainLossBreakdown.from_parts(a, b, c)
        assert total_pretrain_loss(parts) == (a + b) + c


# ---------------------------------------------------------------------------
# Schedule


def test_warmup_schedule_endpoints():
    total = 1000
    assert warmup_linear_decay(0, total, 1e-4, 0.10) == 0.0
    assert warmup_linear_decay(100, total, 1e-4, 0.10) == pytest.approx(1e-4)
    assert warmup_linear_decay(50, total, 1e-4, 0.10) == pytest.approx(5e-5)
    assert warmup_linear_decay(1000, total, 1e-4, 0.10) == 0.0
    mid = warmup_linear_decay(550, total, 1e-4, 0.10)
    assert 0 < mid < 1e-4


# ---------------------------------------------------------------------------
# Instance assembly


@pytest.fixture
def synth_small():
    examples, dictionary = generate_synthetic(
        2, 2, 6, 0.8, seed=3, num_fillers=8, cues_per_sense=2
    )
    vocab = build_vocabulary(examples, dictionary, min_freq=1)
    return examples, dictionary, vocab


def test_instance_alignment_and_masks(synth_small):
    examples, dictionary, vocab = synth_small
    ex = examples[0]
    cand = sample_candidates(ex, dictionary, 2, seed=5)
    inst = build_pretrain_instance(
        ex, examples[1].tokens, 1, cand, vocab, MlmPolicy(0.15), 48, seed=9
    )
    assert len(inst.student_ids) == len(inst.teacher_ids)
    assert len(inst.student_ids) == len(inst.segment_ids)
    assert inst.student_ids[inst.mask_position] == MASK_ID
    assert inst.teacher_ids[inst.mask_position] == MASK_ID  # placeholder under the slot
    assert inst.mask_position not in inst.mlm_positions
    assert inst.nsp_label == 1
    assert len(inst.negative_phrase_ids) == 2
    assert inst.segment_ids[0] == 0 and inst.segment_ids[-1] == 1


def test_instance_respects_max_length(synth_small):
    examples, dictionary, vocab = synth_small
    long_tokens = [f"w{i % 8:02d}" for i in range(80)]
    long_tokens[40] = "ac0"
    ex = AcronymExample(
        id="long", tokens=long_tokens, acronym_span=(40, 41), short_form="ac0",
        gold_long_form=dictionary.candidates("ac0")[0],
    )
    cand = sample_candidates(ex, dictionary, 2, seed=5)
    inst = build_pretrain_instance(
        ex, examples[0].tokens, 0, cand, vocab, None, 32, seed=9
    )
    assert len(inst.student_ids) <= 32
    assert inst.student_ids[inst.mask_position] == MASK_ID


# ---------------------------------------------------------------------------
# Gradients of the full pre-training objective (small dims; the full-size
# check runs in the acceptance suite)


def test_pretrain_loss_gradcheck_small(synth_small):
    examples, dictionary, vocab = synth_small
    cfg = EncoderConfig(vocab_size=vocab.size, hidden_dim=6, num_layers=1,
                        num_heads=2, ffn_dim=8, max_sequence_length=24,
                        dropout_rate=0.0)
    student = init_encoder_params(cfg, 2)
    teacher = init_encoder_params(cfg, 3)  # distinct frozen weights
    instances = []
    for k, ex in enumerate(examples[:2]):
        cand = sample_candidates(ex, dictionary, 2, seed=k)
        instances.append(build_pretrain_instance(
            ex, examples[k + 2].tokens, k % 2, cand, vocab,
            MlmPolicy(rate=0.25), cfg.max_sequence_length, seed=k,
        ))
    assert any(inst.mlm_positions for inst in instances)

    def loss_fn():
        breakdown, _ = pretrain_batch_loss_and_grads(
            student, teacher, cfg, instances, tau=0.5, include_cl=True,
            compute_grads=False,
        )
        return breakdown.total

    breakdown, grads = pretrain_batch_loss_and_grads(
        student, teacher, cfg, instances, tau=0.5, include_cl=True,
    )
    assert breakdown.l_cl > 0
    fd = finite_difference_grads(loss_fn, student)
    for name in student:
        rel = tensor_rel_error(grads.get(name, np.zeros_like(student[name])), fd[name])
        assert rel <= 1e-3, f"{name}: rel error {rel}"


# ---------------------------------------------------------------------------
# Training loop invariants


def test_pretrain_step_counter_and_frozen_teacher(synth_small):
    examples, dictionary, vocab = synth_small
    cfg = EncoderConfig(vocab_size=vocab.size, hidden_dim=8, num_layers=1,
                        num_heads=2, ffn_dim=12, max_sequence_length=32)
    pcfg = PretrainConfig(steps_phase1=3, steps_phase2=2, batch_size=4, seed=1)
    state = init_pretrain_state(pcfg, cfg, vocab)
    teacher_before = params_hash(state.teacher)
    insts = []
    for k, ex in enumerate(examples[:4]):
        cand = sample_candidates(ex, dictionary, 2, seed=k)
        insts.append(build_pretrain_instance(
            ex, examples[k + 1].tokens, k % 2, cand, vocab, MlmPolicy(),
            cfg.max_sequence_length, seed=k,
        ))
    for expected_step in range(5):
        assert state.step == expected_step
        pretrain_step(state, insts)
    assert params_hash(state.teacher) == teacher_before
    assert state.log[0]["lr"] == 0.0  # warmup starts at zero
    assert state.log[0]["l_cl"] > 0.0  # phase 1 includes the contrastive term
    assert state.log[4]["l_cl"] == 0.0  # phase 2 drops it
    with pytest.raises(ParameterError):
        pretrain_step(state, [])


def test_run_pretraining_zero_steps_returns_init(synth_small):
    examples, dictionary, vocab = synth_small
    pcfg = PretrainConfig(steps_phase1=0, steps_phase2=0, batch_size=4, seed=12)
    cfg = EncoderConfig(vocab_size=vocab.size, hidden_dim=8, num_layers=1,
                        num_heads=2, ffn_dim=12, max_sequence_length=32)
    bundle, log = run_pretraining(pcfg, examples, dictionary, encoder_config=cfg, vocab=vocab)
    fresh_state = init_pretrain_state(pcfg, cfg, vocab)
    assert params_hash(bundle.params) == params_hash(fresh_state.student)
    assert log == []


def test_run_pretraining_cl_decreases_and_is_deterministic(synth_small, tmp_path):
    examples, dictionary, vocab = synth_small
    cfg = EncoderConfig(vocab_size=vocab.size, hidden_dim=16, num_layers=1,
                        num_heads=2, ffn_dim=32, max_sequence_length=48,
                        dropout_rate=0.1)
    pcfg = PretrainConfig(steps_phase1=80, steps_phase2=0, batch_size=8,
                          lr=3e-3, seed=21)
    log_path = tmp_path / "loss.jsonl"
    bundle, log = run_pretraining(
        pcfg, examples, dictionary, encoder_config=cfg, vocab=vocab, log_path=log_path
    )
    assert log_path.exists()
    first = np.mean([e["l_cl"] for e in log[:20]])
    last = np.mean([e["l_cl"] for e in log[-20:]])
    assert last < first

    bundle2, log2 = run_pretraining(
        pcfg, examples, dictionary, encoder_config=cfg, vocab=vocab
    )
    assert params_hash(bundle.params) == params_hash(bundle2.params)
    assert log[:10] == log2[:10]


def test_pretrain_config_defaults_match_reference():
    cfg = PretrainConfig(steps_phase1=1, steps_phase2=1)
    assert cfg.tau == 0.02
    assert cfg.lr == 1e-4
    assert cfg.warmup_fraction == 0.10
    assert cfg.batch_size == 32
    assert cfg.negatives == 2
