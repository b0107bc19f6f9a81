"""Shared training-loop plumbing: seed streams, batch schedules, evaluation,
and the centralized SGD loop that the baselines and oracles are built on.

Every engine derives its randomness through run_streams(), so a single-client
federated or split run consumes bit-for-bit the same random draws as the
centralized loop; that is what makes the exact-equivalence checks possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, nn
from .data import Dataset, LabelPolicy, binary_truths, smooth_labels
from .errors import ConfigError


def run_streams(seed: int, num_clients: int):
    """Deterministic per-purpose generators for one run.

    Returns (target_smoothing_rng, per_client_schedule_rngs, selection_rng).
    """
    smoothing, sched_root, selection = np.random.SeedSequence(seed).spawn(3)
    client_scheds = [np.random.default_rng(s) for s in sched_root.spawn(num_clients)]
    return np.random.default_rng(smoothing), client_scheds, np.random.default_rng(selection)


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    """Shuffled row positions chunked into batches; the last one may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def evaluate_scores(scores: np.ndarray, val: Dataset) -> tuple[float, float]:
    """(validation loss, mean AUC over target labels) for given predictions."""
    truths = binary_truths(val)
    loss, _ = nn.bce_loss(scores, truths)
    report = metrics.report_from_scores(scores, truths, val.label_names, val.target_labels, {})
    return loss, metrics.mean_auc(report)


def evaluate_model(model: nn.SequentialModel, val: Dataset) -> tuple[float, float]:
    return evaluate_scores(nn.predict(model, val.features), val)


@dataclass(eq=False)
class RoundRecord:
    """One aggregation/communication round; validation metrics are filled on
    the round that closes an epoch (and on every record for per-epoch engines)."""

    index: int
    client_ids: list[int]
    bytes_sent: int
    val_loss: float | None
    val_mean_auc: float | None


@dataclass(eq=False)
class TrainOutcome:
    """Result of the plain centralized loop (also used for local baselines)."""

    model: nn.SequentialModel  # checkpoint from the best epoch
    final_model: nn.SequentialModel
    history: list[RoundRecord]
    loss_trace: list[float]
    epoch_aucs: list[float]
    best_epoch: int | None


def train_centralized(
    model_init: nn.SequentialModel,
    train: Dataset,
    val: Dataset,
    *,
    batch_size: int = 32,
    lr: float = 1e-3,
    max_epochs: int = 10,
    patience: int = 4,
    seed: int = 0,
    policy: LabelPolicy | None = None,
) -> TrainOutcome:
    """Minibatch SGD with early stopping on validation mean AUC."""
    model = model_init.copy()
    if max_epochs == 0:
        return TrainOutcome(model.copy(), model, [], [], [], None)

    smoothing_rng, (sched_rng,), _ = run_streams(seed, 1)
    targets = smooth_labels(train.labels, policy or LabelPolicy(), smoothing_rng)
    features = train.features

    history: list[RoundRecord] = []
    loss_trace: list[float] = []
    epoch_aucs: list[float] = []
    best = model.copy()
    decision = None
    for epoch in range(max_epochs):
        for batch in epoch_batches(sched_rng, len(train), batch_size):
            y, cache = nn.forward(model, features[batch])
            loss, dloss = nn.bce_loss(y, targets[batch])
            nn.sgd_step(model, nn.backward(model, cache, dloss), lr)
            loss_trace.append(loss)
        val_loss, val_auc = evaluate_model(model, val)
        epoch_aucs.append(val_auc)
        history.append(RoundRecord(epoch, [], 0, val_loss, val_auc))
        decision = metrics.early_stop(epoch_aucs, patience=patience, max_epochs=max_epochs)
        if decision.best_epoch == epoch:
            best = model.copy()
        if decision.stop:
            break
    return TrainOutcome(best, model, history, loss_trace, epoch_aucs, decision.best_epoch)
