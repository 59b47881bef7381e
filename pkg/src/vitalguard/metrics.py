"""Classification metrics and paired significance tests.

Pure functions on arrays: no model or filter knowledge lives here. AUC uses
the rank-statistic formulation with midranks for ties; McNemar uses the
continuity-corrected chi-square with an exact-binomial fallback at small
discordant counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "ConfusionCounts",
    "ClassificationMetrics",
    "confusion_counts",
    "metrics_from_predictions",
    "classification_metrics",
    "auc_roc",
    "McNemarResult",
    "mcnemar",
    "holm_bonferroni",
    "chi2_tail_1df",
]

EXACT_FALLBACK_LIMIT = 25  # below this discordant count the binomial is exact


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ConfigError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClassificationMetrics:
    """precision is None when nothing was predicted positive (undefined);
    F1 is 0 in that case."""

    sensitivity: float
    precision: float | None
    f1: float
    accuracy: float
    counts: ConfusionCounts

    def to_json(self) -> dict:
        return {
            "sensitivity": self.sensitivity,
            "precision": self.precision,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "counts": {
                "tp": self.counts.tp,
                "fp": self.counts.fp,
                "tn": self.counts.tn,
                "fn": self.counts.fn,
            },
        }


def _as_binary(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.size == 0:
        raise ConfigError(f"{name}: empty input")
    flat = arr.reshape(-1)
    if not np.isin(flat, (0, 1)).all():
        raise ConfigError(f"{name}: values must be 0 or 1")
    return flat.astype(int)


def confusion_counts(predictions, labels) -> ConfusionCounts:
    p = _as_binary(predictions, "predictions")
    y = _as_binary(labels, "labels")
    if p.shape != y.shape:
        raise ConfigError("predictions and labels differ in length")
    return ConfusionCounts(
        tp=int(((p == 1) & (y == 1)).sum()),
        fp=int(((p == 1) & (y == 0)).sum()),
        tn=int(((p == 0) & (y == 0)).sum()),
        fn=int(((p == 0) & (y == 1)).sum()),
    )


def metrics_from_predictions(predictions, labels) -> ClassificationMetrics:
    counts = confusion_counts(predictions, labels)
    if counts.tp + counts.fn == 0:
        raise ConfigError("metrics need at least one positive label")
    sensitivity = counts.tp / (counts.tp + counts.fn)
    predicted_pos = counts.tp + counts.fp
    precision = None if predicted_pos == 0 else counts.tp / predicted_pos
    if precision is None or precision + sensitivity == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * sensitivity / (precision + sensitivity)
    accuracy = (counts.tp + counts.tn) / counts.total
    return ClassificationMetrics(sensitivity, precision, f1, accuracy, counts)


def classification_metrics(
    scores, labels, threshold: float = 0.5
) -> ClassificationMetrics:
    """Threshold scores (>= threshold is positive) and score them."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ConfigError("classification_metrics: empty input")
    return metrics_from_predictions((scores >= threshold).astype(int), labels)


def auc_roc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties at
    half credit; computed from midranks, identical to the pairwise count."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    y = _as_binary(labels, "labels")
    if scores.shape != y.shape:
        raise ConfigError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("auc_roc needs both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    midranks = cum - (counts - 1) / 2.0  # average 1-based rank per distinct value
    ranks = midranks[inverse]
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def chi2_tail_1df(statistic: float) -> float:
    """P(X >= statistic) for a 1-df chi-square: the square of a standard
    normal, so the tail is erfc(sqrt(s/2))."""
    if statistic < 0:
        raise ConfigError("chi-square statistic must be non-negative")
    return math.erfc(math.sqrt(statistic / 2.0))


@dataclass(frozen=True)
class McNemarResult:
    """statistic/p_value are None for the degenerate no-discordance case.

    b counts windows only the first method got right, c the reverse. The
    statistic is the continuity-corrected chi-square, floored at zero so
    near-identical methods report no evidence rather than spurious mass.
    """

    b: int
    c: int
    statistic: float | None
    p_value: float | None
    method: str

    def to_json(self) -> dict:
        return {
            "b": self.b,
            "c": self.c,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "method": self.method,
        }


def mcnemar(a_correct, b_correct) -> McNemarResult:
    """Paired test on discordant outcomes of two methods over one window set."""
    a = _as_binary(a_correct, "a_correct")
    bc = _as_binary(b_correct, "b_correct")
    if a.shape != bc.shape:
        raise ConfigError("paired outcome vectors differ in length")
    b = int(((a == 1) & (bc == 0)).sum())
    c = int(((a == 0) & (bc == 1)).sum())
    n = b + c
    if n == 0:
        return McNemarResult(b=0, c=0, statistic=None, p_value=None, method="degenerate")
    statistic = max(abs(b - c) - 1, 0) ** 2 / n
    if n < EXACT_FALLBACK_LIMIT:
        k = min(b, c)
        tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n
        p = min(1.0, 2.0 * tail)
        method = "exact-binomial"
    else:
        p = chi2_tail_1df(statistic)
        method = "chi-square"
    return McNemarResult(b=b, c=c, statistic=statistic, p_value=p, method=method)


def holm_bonferroni(p_values: list[float], alpha: float) -> list[bool]:
    """Step-down correction: walk the sorted p-values against increasingly
    lenient thresholds, stopping at the first failure. Returns decisions in
    the input order (True = reject)."""
    if not (0.0 < alpha < 1.0):
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    for p in p_values:
        if not (0.0 <= p <= 1.0):
            raise ConfigError(f"p-value {p} outside [0, 1]")
    m = len(p_values)
    decisions = [False] * m
    order = sorted(range(m), key=lambda i: p_values[i])
    for rank, idx in enumerate(order):
        if p_values[idx] <= alpha / (m - rank):
            decisions[idx] = True
        else:
            break
    return decisions
