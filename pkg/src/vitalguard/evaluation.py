"""Held-out evaluation, the ablation harness, and severity sweeps.

Evaluation is strictly post-hoc: a trained model produces scores once, the
0.5 threshold turns them into predictions, and the plausibility filter may
then suppress positives. Filtered metrics always come from the filtered
prediction vector, never from re-thresholded scores, so the filter can only
trade false positives away.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import InjectionEvent
from .errors import ConfigError
from .metrics import (
    ClassificationMetrics,
    McNemarResult,
    auc_roc,
    mcnemar,
    metrics_from_predictions,
)
from .model import AblationMask, FULL_MASK, ModelConfig, predict_scores
from .plausibility import PlausibilityBounds, filter_predictions
from .streams import LabeledWindow
from .training import TrainConfig, TrainResult, train

DEFAULT_THRESHOLD = 0.5

# Named ablation grid: the full detector, then single-stage removals down to
# single-pathway variants. "X_only" rows run one attention axis with the conv
# refinement stage off; "cnn_only" keeps conv refinement with both attention
# pathways off. The plausibility filter stays on everywhere except "no_ppf".
STANDARD_ABLATION: tuple[tuple[str, AblationMask], ...] = (
    ("full", FULL_MASK),
    ("no_ppf", AblationMask(use_plausibility_filter=False)),
    ("dam_only", AblationMask(use_conv=False)),
    ("twa_only", AblationMask(use_sensor_attention=False)),
    ("swa_only", AblationMask(use_time_attention=False)),
    ("no_skip", AblationMask(use_skip=False)),
    ("cnn_only", AblationMask(use_sensor_attention=False, use_time_attention=False)),
)

ABLATION_GRIDS = {"standard7": STANDARD_ABLATION}


@dataclass(eq=False)
class EvaluationResult:
    """Scores plus metrics before and after the plausibility filter.

    filtered_* entries stay None when the filter was masked off or no bounds
    were supplied. auc is None when the labels are single-class.
    """

    scores: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    metrics: ClassificationMetrics
    auc: float | None
    filtered_predictions: np.ndarray | None = None
    filtered_metrics: ClassificationMetrics | None = None

    @property
    def effective_predictions(self) -> np.ndarray:
        if self.filtered_predictions is not None:
            return self.filtered_predictions
        return self.predictions

    @property
    def effective_metrics(self) -> ClassificationMetrics:
        if self.filtered_metrics is not None:
            return self.filtered_metrics
        return self.metrics


def evaluate_model(
    windows: list[LabeledWindow],
    params: dict,
    model_config: ModelConfig,
    mask: AblationMask = FULL_MASK,
    bounds: PlausibilityBounds | None = None,
    record_rate_hz: float | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> EvaluationResult:
    """Score windows, threshold once, optionally run the plausibility filter."""
    if not windows:
        raise ConfigError("evaluate_model: no windows")
    scores = predict_scores(windows, params, model_config, mask)
    labels = np.array([w.label for w in windows])
    predictions = (scores >= threshold).astype(int)
    metrics = metrics_from_predictions(predictions, labels)
    auc = auc_roc(scores, labels) if len(set(labels.tolist())) == 2 else None

    filtered_predictions = None
    filtered_metrics = None
    if mask.use_plausibility_filter and bounds is not None:
        filtered_predictions = filter_predictions(
            predictions, windows, bounds, record_rate_hz
        )
        filtered_metrics = metrics_from_predictions(filtered_predictions, labels)

    return EvaluationResult(
        scores=scores,
        labels=labels,
        predictions=predictions,
        metrics=metrics,
        auc=auc,
        filtered_predictions=filtered_predictions,
        filtered_metrics=filtered_metrics,
    )


def evaluation_json(
    result: EvaluationResult, config_name: str, seed: int
) -> dict:
    """Flat record of the effective (post-filter when active) metrics."""
    m = result.effective_metrics
    return {
        "config": config_name,
        "seed": seed,
        "sensitivity": m.sensitivity,
        "precision": m.precision,
        "f1": m.f1,
        "accuracy": m.accuracy,
        "auc": result.auc,
        "counts": {
            "tp": m.counts.tp,
            "fp": m.counts.fp,
            "tn": m.counts.tn,
            "fn": m.counts.fn,
        },
    }


@dataclass(eq=False)
class AblationRow:
    name: str
    mask: AblationMask
    result: EvaluationResult
    train_result: TrainResult
    mcnemar_vs_full: McNemarResult | None


def _architecture_key(mask: AblationMask) -> tuple[bool, bool, bool, bool]:
    # the plausibility filter never touches training, so configurations that
    # differ only in it share one trained model (and bit-identical scores)
    return (
        mask.use_sensor_attention,
        mask.use_time_attention,
        mask.use_conv,
        mask.use_skip,
    )


def run_ablation(
    train_windows: list[LabeledWindow],
    val_windows: list[LabeledWindow],
    test_windows: list[LabeledWindow],
    model_config: ModelConfig,
    train_config: TrainConfig,
    grid: tuple[tuple[str, AblationMask], ...] = STANDARD_ABLATION,
    bounds: PlausibilityBounds | None = None,
    record_rate_hz: float | None = None,
) -> list[AblationRow]:
    """Train every grid configuration on identical splits and seed, evaluate
    on the shared test set, and pair each against the first row with
    McNemar's test. Rows come back ranked by effective sensitivity."""
    if not grid:
        raise ConfigError("run_ablation: empty grid")
    names = [name for name, _ in grid]
    if len(set(names)) != len(names):
        raise ConfigError("run_ablation: duplicate configuration names")

    trained: dict[tuple, TrainResult] = {}
    rows: list[AblationRow] = []
    for name, mask in grid:
        key = _architecture_key(mask)
        if key not in trained:
            trained[key] = train(
                train_windows, val_windows, model_config, train_config, mask=mask
            )
        train_result = trained[key]
        result = evaluate_model(
            test_windows,
            train_result.params,
            model_config,
            mask,
            bounds=bounds,
            record_rate_hz=record_rate_hz,
        )
        rows.append(AblationRow(name, mask, result, train_result, None))

    baseline = rows[0]
    base_correct = baseline.result.effective_predictions == baseline.result.labels
    for row in rows[1:]:
        row_correct = row.result.effective_predictions == row.result.labels
        row.mcnemar_vs_full = mcnemar(base_correct, row_correct)

    rows.sort(key=lambda r: r.result.effective_metrics.sensitivity, reverse=True)
    return rows


def ablation_table_csv(rows: list[AblationRow], path: str | Path) -> None:
    """Ranked configuration table with the paired-test columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "config",
                "sensitivity",
                "precision",
                "f1",
                "accuracy",
                "auc",
                "mcnemar_statistic",
                "mcnemar_p",
            ]
        )
        for row in rows:
            m = row.result.effective_metrics
            mc = row.mcnemar_vs_full
            writer.writerow(
                [
                    row.name,
                    repr(m.sensitivity),
                    "" if m.precision is None else repr(m.precision),
                    repr(m.f1),
                    repr(m.accuracy),
                    "" if row.result.auc is None else repr(row.result.auc),
                    "" if mc is None or mc.statistic is None else repr(mc.statistic),
                    "" if mc is None or mc.p_value is None else repr(mc.p_value),
                ]
            )


def tag_windows(
    windows: list[LabeledWindow],
    events_by_record: dict[str, list[InjectionEvent]],
) -> list[set[tuple[str, int]]]:
    """(attack type, level) tags for every event overlapping each window.

    A window spanning steps [end_time - L + 1, end_time] picks up the tag of
    every event whose span intersects it; clean windows get an empty set.
    """
    tags: list[set[tuple[str, int]]] = []
    for w in windows:
        length = w.values.shape[1]
        lo = w.end_time - length + 1
        hi = w.end_time
        found: set[tuple[str, int]] = set()
        for event in events_by_record.get(w.record_id, ()):
            if event.start <= hi and event.start + event.duration - 1 >= lo:
                found.add((event.attack_type.value, event.level))
        tags.append(found)
    return tags


def severity_sweep(
    windows: list[LabeledWindow],
    predictions: np.ndarray,
    events_by_record: dict[str, list[InjectionEvent]],
) -> list[dict]:
    """Tidy per-(attack type, severity) rows for plotting.

    For every tag present in the corpus, sensitivity is the detection rate
    over windows carrying that tag; support counts those windows. Windows
    overlapping several events contribute to each overlapped tag.
    """
    predictions = np.asarray(predictions)
    if len(predictions) != len(windows):
        raise ConfigError("severity_sweep: predictions and windows differ in length")
    tags = tag_windows(windows, events_by_record)
    groups: dict[tuple[str, int], list[int]] = {}
    for i, found in enumerate(tags):
        for tag in found:
            groups.setdefault(tag, []).append(i)

    rows: list[dict] = []
    for (attack_type, level) in sorted(groups):
        idx = groups[(attack_type, level)]
        hit = float(np.mean([predictions[i] == 1 for i in idx]))
        rows.append(
            {
                "attack_type": attack_type,
                "severity": level,
                "metric": "sensitivity",
                "value": hit,
            }
        )
        rows.append(
            {
                "attack_type": attack_type,
                "severity": level,
                "metric": "support",
                "value": float(len(idx)),
            }
        )
    return rows


def sweep_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["attack_type", "severity", "metric", "value"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {
                "attack_type": r["attack_type"],
                "severity": int(r["severity"]),
                "metric": r["metric"],
                "value": float(r["value"]),
            }
            for r in csv.DictReader(fh)
        ]
