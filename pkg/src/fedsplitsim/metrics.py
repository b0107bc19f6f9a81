"""Per-label AUROC, mean AUC over the evaluation labels, and early stopping."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, MetricUndefinedError


@dataclass(eq=False)
class LabelScores:
    """Predictions and binary ground truth for one label."""

    label: str
    scores: np.ndarray
    truths: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truths = np.asarray(self.truths, dtype=np.float64)
        if self.scores.shape != self.truths.shape:
            raise DimensionError(
                f"{self.label}: {self.scores.shape} scores vs {self.truths.shape} truths"
            )
        if not np.all((self.truths == 0.0) | (self.truths == 1.0)):
            raise ConfigError(f"{self.label}: truths must be binary")


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values assigned the mean of their rank range."""
    idx = np.argsort(values, kind="mergesort")
    ordered = values[idx]
    new_group = np.r_[True, ordered[1:] != ordered[:-1]]
    group_id = np.cumsum(new_group) - 1
    counts = np.bincount(group_id)
    first_rank = np.concatenate(([0], np.cumsum(counts)[:-1])) + 1.0
    mid = first_rank + (counts - 1) / 2.0
    ranks = np.empty(values.shape, dtype=np.float64)
    ranks[idx] = mid[group_id]
    return ranks


def auroc(scores, truths) -> float:
    """Area under the ROC curve via the rank-sum (Mann-Whitney) statistic.

    Args:
        scores: prediction values, higher means more likely positive.
        truths: binary ground truth, same length as scores.

    Returns:
        The fraction of (positive, negative) pairs ranked correctly, ties
        counting one half.

    Raises:
        MetricUndefinedError: if truths contain only one class.
    """
    pair = LabelScores("auroc", scores, truths)
    pos = pair.truths == 1.0
    n_pos = int(pos.sum())
    n_neg = pair.truths.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(f"need both classes, got {n_pos} positives, {n_neg} negatives")
    ranks = _midranks(pair.scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    """Per-target-label AUC for one experiment cell.

    A label whose validation truths are single-class gets a None entry and
    flips `complete` to False; it is surfaced, never silently dropped.
    """

    descriptor: dict[str, str]
    per_label: dict[str, float | None] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return all(v is not None for v in self.per_label.values())


def report_from_scores(scores, truths, label_names, target_labels, descriptor) -> MetricsReport:
    """Build a report from full prediction/truth matrices over all labels."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if scores.shape != truths.shape:
        raise DimensionError(f"scores shape {scores.shape} != truths shape {truths.shape}")
    per_label: dict[str, float | None] = {}
    for name in target_labels:
        col = label_names.index(name)
        try:
            per_label[name] = auroc(scores[:, col], truths[:, col])
        except MetricUndefinedError:
            per_label[name] = None
    return MetricsReport(descriptor=dict(descriptor), per_label=per_label)


def mean_auc(report: MetricsReport) -> float:
    """Arithmetic mean of the per-target-label AUCs."""
    if not report.per_label:
        raise MetricUndefinedError("report holds no labels")
    if not report.complete:
        missing = [k for k, v in report.per_label.items() if v is None]
        raise MetricUndefinedError(f"report incomplete, undefined AUC for {missing}")
    values = list(report.per_label.values())
    return float(sum(values) / len(values))


@dataclass
class EarlyStopDecision:
    stop: bool
    best_epoch: int  # 0-based index of the checkpoint to keep


def early_stop(history, patience: int = 4, max_epochs: int = 10) -> EarlyStopDecision:
    """Stop once the metric has not improved on its best for `patience`
    consecutive epochs, or when max_epochs is reached.

    `history` is the epoch-level metric trace so far (higher is better).
    """
    values = list(history)
    if not values:
        raise ConfigError("history must be non-empty")
    best_epoch = int(np.argmax(values))  # first occurrence wins on ties
    epochs_since_best = len(values) - 1 - best_epoch
    stop = epochs_since_best >= patience or len(values) >= max_epochs
    return EarlyStopDecision(stop=stop, best_epoch=best_epoch)


def write_labels_csv(rows, path) -> None:
    """Write (experiment, label, auc) rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["experiment", "label", "auc"])
        for experiment, label, value in rows:
            writer.writerow([experiment, label, "" if value is None else repr(float(value))])


def report_json(report: MetricsReport) -> dict:
    """JSON-ready summary object for one experiment cell."""
    obj = dict(report.descriptor)
    obj["labels"] = {k: v for k, v in report.per_label.items()}
    obj["mean_auc"] = mean_auc(report) if report.complete else None
    obj["complete"] = report.complete
    return obj


def dump_summary_json(reports, path) -> None:
    with open(path, "w") as f:
        json.dump([report_json(r) for r in reports], f, indent=2, sort_keys=True)
        f.write("\n")
