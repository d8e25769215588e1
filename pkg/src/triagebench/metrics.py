"""Ordinal-classification scoring for 5-level acuity predictions.

Scores gold/predicted pairs with accuracy, macro F-1, quadratic-weighted
kappa, and mean squared error, and exposes the confusion matrix and
per-level distributions the reports are built from. Unparseable model
responses never reach these functions; callers track them in
``excluded_count`` so reports can surface the exclusion.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import ACUITY_MAX, ACUITY_MIN

N_LEVELS = ACUITY_MAX - ACUITY_MIN + 1


class EmptyPredictionSetError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionSet:
    pairs: tuple[tuple[int, int], ...]
    excluded_count: int = 0

    def __post_init__(self):
        for gold, pred in self.pairs:
            if not ACUITY_MIN <= gold <= ACUITY_MAX or not ACUITY_MIN <= pred <= ACUITY_MAX:
                raise ValueError(f"acuity pair ({gold}, {pred}) outside [1, 5]")

    def _require_nonempty(self):
        if not self.pairs:
            raise EmptyPredictionSetError("no (gold, predicted) pairs to score")


def confusion_matrix(p: PredictionSet) -> np.ndarray:
    """5x5 count matrix; rows are gold levels, columns predicted levels."""
    p._require_nonempty()
    matrix = np.zeros((N_LEVELS, N_LEVELS), dtype=np.int64)
    for gold, pred in p.pairs:
        matrix[gold - 1, pred - 1] += 1
    return matrix


def accuracy(p: PredictionSet) -> float:
    p._require_nonempty()
    return sum(1 for gold, pred in p.pairs if gold == pred) / len(p.pairs)


def mse(p: PredictionSet) -> float:
    p._require_nonempty()
    return sum((gold - pred) ** 2 for gold, pred in p.pairs) / len(p.pairs)


def _f1_per_class(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class F1 and the mask of classes present in gold or predictions."""
    tp = np.diag(matrix).astype(float)
    gold_totals = matrix.sum(axis=1).astype(float)
    pred_totals = matrix.sum(axis=0).astype(float)
    f1 = np.zeros(N_LEVELS)
    for c in range(N_LEVELS):
        # F1 via counts: 2*tp / (gold + pred); zero when P + R == 0.
        denom = gold_totals[c] + pred_totals[c]
        if denom > 0:
            f1[c] = 2.0 * tp[c] / denom
    participating = (gold_totals + pred_totals) > 0
    return f1, participating


def macro_f1(p: PredictionSet, include_empty_classes: bool = False) -> float:
    """Unweighted mean F1 over the five ordinal classes.

    By default classes absent from both gold and predictions are excluded
    from the mean (they carry no information); with
    ``include_empty_classes`` they participate with F1 = 0.
    """
    f1, participating = _f1_per_class(confusion_matrix(p))
    if include_empty_classes:
        return float(f1.mean())
    return float(f1[participating].mean())


def weighted_f1(p: PredictionSet) -> float:
    """Gold-support-weighted mean F1 (alternative F-1 reading)."""
    matrix = confusion_matrix(p)
    f1, _ = _f1_per_class(matrix)
    support = matrix.sum(axis=1).astype(float)
    return float((f1 * support).sum() / support.sum())


def qwk(p: PredictionSet) -> float:
    """Quadratic-weighted kappa over the five ordinal levels.

    Weights w_ij = (i - j)^2 / (K - 1)^2; kappa = 1 - sum(w*O) / sum(w*E)
    with O the observed proportion matrix and E the outer product of the
    gold and predicted marginals. When both marginals are the same point
    mass, sum(w*E) = 0 and agreement is total: kappa = 1 (degenerate case).
    """
    matrix = confusion_matrix(p).astype(float)
    n = matrix.sum()
    observed = matrix / n
    gold_marginal = observed.sum(axis=1)
    pred_marginal = observed.sum(axis=0)
    expected = np.outer(gold_marginal, pred_marginal)

    idx = np.arange(N_LEVELS)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (N_LEVELS - 1) ** 2

    expected_disagreement = float((weights * expected).sum())
    if expected_disagreement == 0.0:
        return 1.0
    return 1.0 - float((weights * observed).sum()) / expected_disagreement


def level_distribution(levels: Sequence[int]) -> tuple[float, ...]:
    """Proportion of each acuity level 1..5; sums to 1."""
    if not levels:
        raise ValueError("empty level list")
    counts = [0] * N_LEVELS
    for level in levels:
        if not ACUITY_MIN <= level <= ACUITY_MAX:
            raise ValueError(f"acuity level {level} outside [1, 5]")
        counts[level - 1] += 1
    total = len(levels)
    return tuple(c / total for c in counts)


@dataclass(frozen=True)
class MetricReport:
    strategy: str
    qwk: float
    mse: float
    macro_f1: float
    weighted_f1: float
    accuracy: float
    n: int
    excluded_count: int
    confusion: tuple[tuple[int, ...], ...]
    gold_distribution: tuple[float, ...]
    predicted_distribution: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "qwk": self.qwk,
            "mse": self.mse,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy,
            "n": self.n,
            "excluded_count": self.excluded_count,
            "confusion": [list(row) for row in self.confusion],
            "gold_distribution": list(self.gold_distribution),
            "predicted_distribution": list(self.predicted_distribution),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def score(p: PredictionSet, strategy: str = "") -> MetricReport:
    matrix = confusion_matrix(p)
    return MetricReport(
        strategy=strategy,
        qwk=qwk(p),
        mse=mse(p),
        macro_f1=macro_f1(p),
        weighted_f1=weighted_f1(p),
        accuracy=accuracy(p),
        n=len(p.pairs),
        excluded_count=p.excluded_count,
        confusion=tuple(tuple(int(v) for v in row) for row in matrix),
        gold_distribution=level_distribution([g for g, _ in p.pairs]),
        predicted_distribution=level_distribution([pred for _, pred in p.pairs]),
    )


def render_metric_table(reports: Sequence[MetricReport]) -> str:
    """Fixed-width text table, one row per strategy (QWK, MSE, F-1, Acc.)."""
    header = f"{'Methodology':<24}{'QWK':>8}{'MSE':>8}{'F-1':>8}{'Acc.':>8}{'n':>7}{'excl.':>7}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.strategy:<24}{r.qwk:>8.3f}{r.mse:>8.3f}{r.macro_f1:>8.3f}"
            f"{r.accuracy:>8.3f}{r.n:>7d}{r.excluded_count:>7d}"
        )
    return "\n".join(lines) + "\n"
