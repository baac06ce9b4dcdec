"""Rule-based disambiguation baseline: token-overlap similarity between the
sentence and each candidate long form."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .corpus import AcronymExample, Dictionary, tokenize
from .errors import ParameterError


@dataclass
class RuleScore:
    candidate: str
    overlap: int
    normalized: float


def schwartz_similarity(sentence_tokens: list[str], candidate_phrase: str) -> RuleScore:
    """Case-folded multiset overlap between sentence and candidate tokens,
    normalized by candidate length."""
    cand_tokens = tokenize(candidate_phrase)
    if not cand_tokens:
        raise ParameterError("candidate phrase must be nonempty")
    sent_counts = Counter(t.lower() for t in sentence_tokens)
    cand_counts = Counter(cand_tokens)
    overlap = sum(min(sent_counts[t], c) for t, c in cand_counts.items())
    return RuleScore(
        candidate=candidate_phrase,
        overlap=overlap,
        normalized=overlap / len(cand_tokens),
    )


def rule_based_predict(ex: AcronymExample, dictionary: Dictionary) -> str:
    """Candidate with the highest normalized overlap; ties go to dictionary order."""
    best = None
    best_score = -1.0
    for cand in dictionary.candidates(ex.short_form):
        score = schwartz_similarity(ex.tokens, cand).normalized
        if score > best_score:
            best = cand
            best_score = score
    return best
