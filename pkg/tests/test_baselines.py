import pytest

from acrodis.baselines import rule_based_predict, schwartz_similarity
from acrodis.corpus import AcronymExample, Dictionary
from acrodis.errors import ParameterError


def _ex(tokens, span=(0, 1), gold=None):
    return AcronymExample(
        id="e", tokens=tokens, acronym_span=span,
        short_form=" ".join(tokens[span[0]:span[1]]), gold_long_form=gold,
    )


def test_similarity_full_overlap():
    score = schwartz_similarity(["we", "use", "support", "vector", "machines"],
                                "support vector machines")
    assert score.overlap == 3
    assert score.normalized == 1.0


def test_similarity_zero_overlap():
    score = schwartz_similarity(["nothing", "shared"], "support vector machines")
    assert score.overlap == 0
    assert score.normalized == 0.0


def test_similarity_partial_hand_count():
    score = schwartz_similarity(["we", "train", "support", "vector", "models"],
                                "support vector machines")
    assert score.overlap == 2
    assert score.normalized == pytest.approx(2.0 / 3.0)


def test_similarity_case_folded():
    score = schwartz_similarity(["Support", "VECTOR"], "support vector machines")
    assert score.overlap == 2


def test_similarity_multiset_semantics():
    # candidate needs two copies of "alpha"; the sentence has one
    score = schwartz_similarity(["alpha", "x"], "alpha alpha")
    assert score.overlap == 1
    assert score.normalized == 0.5


def test_similarity_order_invariant():
    a = schwartz_similarity(["b", "a", "c"], "a b")
    b = schwartz_similarity(["c", "a", "b"], "a b")
    assert a.normalized == b.normalized


def test_similarity_empty_candidate():
    with pytest.raises(ParameterError):
        schwartz_similarity(["a"], "   ")


def test_similarity_bounds():
    score = schwartz_similarity(["a", "a", "a"], "a b c d")
    assert 0.0 <= score.normalized <= 1.0


@pytest.fixture
def svm_dict():
    return Dictionary({"svm": ["support vector machines", "state vector machine"]})


def test_rule_predict_verbatim_candidate_wins(svm_dict):
    ex = _ex(["the", "svm", "or", "support", "vector", "machines", "model"], (1, 2))
    assert rule_based_predict(ex, svm_dict) == "support vector machines"


def test_rule_predict_support_context(svm_dict):
    ex = _ex(["we", "train", "a", "svm", "on", "support", "vector", "machines"], (3, 4))
    assert rule_based_predict(ex, svm_dict) == "support vector machines"


def test_rule_predict_all_zero_ties_to_first(svm_dict):
    ex = _ex(["svm", "only"], (0, 1))
    assert rule_based_predict(ex, svm_dict) == "support vector machines"


def test_rule_predict_unknown_short_form(svm_dict):
    ex = _ex(["abc"], (0, 1))
    with pytest.raises(LookupError):
        rule_based_predict(ex, svm_dict)


def test_rule_predict_deterministic(svm_dict):
    ex = _ex(["svm", "state", "machine", "theory"], (0, 1))
    assert rule_based_predict(ex, svm_dict) == rule_based_predict(ex, svm_dict)
    assert rule_based_predict(ex, svm_dict) == "state vector machine"
