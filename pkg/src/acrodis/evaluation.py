"""Macro precision/recall/F1 scoring and weighted probability fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ParameterError, ValidationError


@dataclass
class MetricReport:
    per_class: dict[str, tuple[float, float]]  # class -> (precision, recall)
    macro_precision: float
    macro_recall: float
    macro_f1: float
    n_classes: int

    def to_dict(self) -> dict:
        return {
            "per_class": {c: {"precision": p, "recall": r} for c, (p, r) in self.per_class.items()},
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "n_classes": self.n_classes,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def as_table(self, max_rows: int = 20) -> str:
        width = max([len(c) for c in self.per_class] + [5])
        lines = [f"{'class':<{width}}  precision  recall"]
        for cls in sorted(self.per_class)[:max_rows]:
            p, r = self.per_class[cls]
            lines.append(f"{cls:<{width}}  {p:9.4f}  {r:6.4f}")
        if len(self.per_class) > max_rows:
            lines.append(f"... ({len(self.per_class) - max_rows} more classes)")
        lines.append(
            f"{'macro':<{width}}  {self.macro_precision:9.4f}  {self.macro_recall:6.4f}"
            f"  f1 {self.macro_f1:.4f}"
        )
        return "\n".join(lines)


def macro_f1_from_pr(precision: float, recall: float) -> float:
    """Harmonic mean of macro precision and macro recall (0 when both are 0)."""
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_metrics(
    predictions: dict[str, str],
    gold: dict[str, str],
    classes: list[str] | None = None,
) -> MetricReport:
    """Macro-averaged precision and recall over classes, with F1 as their
    harmonic mean (not the mean of per-class F1s).

    Per-class precision/recall with a zero denominator are defined as 0.
    ``classes`` defaults to the gold long forms observed in the split.
    """
    missing = sorted(set(gold) - set(predictions))
    if missing:
        raise ValidationError(f"missing predictions for ids: {missing}")
    if classes is None:
        classes = sorted(set(gold.values()))
    if not classes:
        raise ParameterError("no classes to evaluate")
    per_class: dict[str, tuple[float, float]] = {}
    for cls in classes:
        tp = sum(1 for i, g in gold.items() if g == cls and predictions[i] == cls)
        fp = sum(1 for i, g in gold.items() if g != cls and predictions[i] == cls)
        fn = sum(1 for i, g in gold.items() if g == cls and predictions[i] != cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        per_class[cls] = (precision, recall)
    n = len(classes)
    macro_p = sum(p for p, _ in per_class.values()) / n
    macro_r = sum(r for _, r in per_class.values()) / n
    return MetricReport(
        per_class=per_class,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f1_from_pr(macro_p, macro_r),
        n_classes=n,
    )


def ensemble_fuse(
    prob_tables: list[dict[str, dict[str, float]]],
    weights: list[float],
) -> dict[str, str]:
    """Weighted fusion of per-candidate probability tables; argmax per id with
    ties broken by candidate order."""
    if not prob_tables:
        raise ParameterError("need at least one probability table")
    if len(weights) != len(prob_tables):
        raise ParameterError("one weight per table required")
    if any(w < 0 for w in weights):
        raise ParameterError("weights must be nonnegative")
    wsum = sum(weights)
    if wsum == 0:
        raise ParameterError("weights must not all be zero")
    base = prob_tables[0]
    ids = set(base)
    for k, table in enumerate(prob_tables[1:], start=1):
        if set(table) != ids:
            raise ValidationError(f"table {k} covers different example ids")
        for ex_id in ids:
            if set(table[ex_id]) != set(base[ex_id]):
                raise ValidationError(f"candidate sets differ for example {ex_id!r}")
    fused_labels: dict[str, str] = {}
    for ex_id, cand_probs in base.items():
        best_label = None
        best_score = None
        for cand in cand_probs:  # first table's candidate order breaks ties
            score = sum(w * t[ex_id][cand] for w, t in zip(weights, prob_tables)) / wsum
            if best_score is None or score > best_score:
                best_score = score
                best_label = cand
        fused_labels[ex_id] = best_label
    return fused_labels
