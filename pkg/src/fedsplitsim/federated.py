"""Federated learning coordinator.

Each round runs the four-step workflow: select clients, have them compute on
their local shard against the current global weights, report the updates, and
aggregate. Two aggregators are provided: gradient averaging (one step on the
sample-weighted mean gradient) and weight averaging (sample-weighted mean of
locally trained parameter sets, relaxed by the server learning rate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, nn
from .data import Dataset, LabelPolicy, PartitionPlan, resolve_plan, smooth_labels
from .errors import ConfigError, ProtocolError
from .simnet import SERVER_ID, CommLog, Message, MessageKind
from .training import RoundRecord, epoch_batches, evaluate_model, run_streams

GRANULARITIES = ("fine", "coarse")
AGGREGATIONS = ("fedsgd", "fedavg")


@dataclass
class FedConfig:
    num_clients: int = 5
    client_fraction: float = 1.0
    client_lr: float = 1e-3
    server_lr: float = 1.0
    aggregation: str = "fedsgd"  # applies to fine granularity; coarse always aggregates weights
    granularity: str = "fine"
    batch_size: int = 1
    max_epochs: int = 10
    patience: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if self.client_lr <= 0.0 or self.server_lr <= 0.0:
            raise ConfigError("learning rates must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("need max_epochs >= 0 and patience >= 1")


@dataclass(eq=False)
class ClientUpdate:
    client_id: int
    kind: str  # "gradient" | "weights"
    payload: list[np.ndarray]
    n_k: int
    losses: list[float] = field(default_factory=list)  # local batch losses, diagnostic


def select_clients(client_ids, fraction: float, rng: np.random.Generator) -> list[int]:
    """Sample round(fraction * K) clients without replacement, at least one.
    Full participation keeps the given order."""
    ids = list(client_ids)
    if not ids:
        raise ConfigError("no clients to select from")
    if fraction >= 1.0:
        return ids
    count = max(1, int(math.floor(fraction * len(ids) + 0.5)))
    picked = rng.choice(len(ids), size=count, replace=False)
    return [ids[i] for i in sorted(picked)]


def client_compute(
    model: nn.SequentialModel,
    client_id: int,
    features: np.ndarray,
    targets: np.ndarray,
    lr: float,
    payload_kind: str,
    batches: list[np.ndarray] | None = None,
) -> ClientUpdate:
    """Compute one client's contribution on its data unit.

    "gradient": the mean gradient evaluated at the global weights, no mutation.
    "weights": parameters after one local SGD pass (one step over the unit, or
    one step per entry of `batches` when given).
    """
    if len(features) == 0:
        raise ProtocolError(f"client {client_id} received an empty data unit")
    if payload_kind == "gradient":
        y, cache = nn.forward(model, features)
        loss, dloss = nn.bce_loss(y, targets)
        grads = nn.backward(model, cache, dloss)
        return ClientUpdate(client_id, "gradient", grads.param_grads, len(features), [loss])
    if payload_kind == "weights":
        local = model.copy()
        losses = []
        for batch in batches if batches is not None else [np.arange(len(features))]:
            y, cache = nn.forward(local, features[batch])
            loss, dloss = nn.bce_loss(y, targets[batch])
            nn.sgd_step(local, nn.backward(local, cache, dloss), lr)
            losses.append(loss)
        return ClientUpdate(client_id, "weights", [p.copy() for p in local.parameters()], len(features), losses)
    raise ProtocolError(f"unknown payload kind {payload_kind!r}")


def _check_updates(model: nn.SequentialModel, updates: list[ClientUpdate], kind: str) -> list[ClientUpdate]:
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    if any(u.kind != kind for u in updates):
        kinds = sorted({u.kind for u in updates})
        raise ProtocolError(f"expected only {kind!r} payloads, got {kinds}")
    params = model.parameters()
    for u in updates:
        if len(u.payload) != len(params) or any(
            a.shape != p.shape for a, p in zip(u.payload, params)
        ):
            raise ProtocolError(f"client {u.client_id} payload does not match the global model")
    # canonical reduction order: float addition is not associative
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_fedsgd(model: nn.SequentialModel, updates: list[ClientUpdate], eta: float) -> nn.SequentialModel:
    """w <- w - eta * sum_k (n_k / n) g_k, summed in ascending client id order."""
    updates = _check_updates(model, updates, "gradient")
    n = sum(u.n_k for u in updates)
    if n <= 0:
        raise ProtocolError("aggregate over zero samples")
    params = model.parameters()
    for i, p in enumerate(params):
        delta = np.zeros_like(p)
        for u in updates:
            delta += (u.n_k / n) * u.payload[i]
        p -= eta * delta
    return model


def aggregate_fedavg(model: nn.SequentialModel, updates: list[ClientUpdate], eta_s: float) -> nn.SequentialModel:
    """w <- w + eta_s * (sum_k (n_k / n) w_k - w); plain averaging at eta_s = 1."""
    updates = _check_updates(model, updates, "weights")
    n = sum(u.n_k for u in updates)
    if n <= 0:
        raise ProtocolError("aggregate over zero samples")
    params = model.parameters()
    for i, p in enumerate(params):
        avg = np.zeros_like(p)
        for u in updates:
            avg += (u.n_k / n) * u.payload[i]
        p += eta_s * (avg - p)
    return model


@dataclass(eq=False)
class FederatedResult:
    model: nn.SequentialModel  # best-epoch checkpoint
    final_model: nn.SequentialModel
    history: list[RoundRecord]
    epoch_aucs: list[float]
    best_epoch: int | None
    loss_trace: list[float]
    comm: CommLog
    aggregator_used: str


def run_federated(
    config: FedConfig,
    train: Dataset,
    plan: PartitionPlan,
    model_init: nn.SequentialModel,
    val: Dataset,
    policy: LabelPolicy | None = None,
) -> FederatedResult:
    """Run federated rounds until early stopping or max_epochs.

    Fine granularity: every selected client contributes one batch per round,
    cursors advancing without overlap until all local data is consumed (one
    epoch). Coarse granularity: one round per epoch, each client training a
    full local pass; weight aggregation is always used there since a multi-step
    local pass has no single gradient to average.
    """
    if plan.num_clients != config.num_clients:
        raise ConfigError(
            f"plan has {plan.num_clients} clients, config expects {config.num_clients}"
        )
    model = model_init.copy()
    log = CommLog()
    if config.max_epochs == 0:
        return FederatedResult(model.copy(), model, [], [], None, [], log, "none")

    k = config.num_clients
    smoothing_rng, client_scheds, select_rng = run_streams(config.seed, k)
    targets = smooth_labels(train.labels, policy or LabelPolicy(), smoothing_rng)
    clients = resolve_plan(train, plan)
    client_x = [train.features[c.rows] for c in clients]
    client_t = [targets[c.rows] for c in clients]

    fine = config.granularity == "fine"
    aggregator = config.aggregation if fine else "fedavg"
    update_kind = "gradient" if aggregator == "fedsgd" else "weights"
    update_msg_kind = MessageKind.GRADIENT if update_kind == "gradient" else MessageKind.WEIGHTS

    history: list[RoundRecord] = []
    epoch_aucs: list[float] = []
    loss_trace: list[float] = []
    best = model.copy()
    decision = None
    round_idx = 0

    def run_round(units: list[tuple[int, np.ndarray, list[np.ndarray] | None]]) -> None:
        """units: (client_id, row positions of the data unit, local batches)."""
        nonlocal round_idx
        log_start = len(log)
        updates = []
        for cid, rows, batches in units:
            log.send(Message(MessageKind.WEIGHTS, round_idx, SERVER_ID, cid + 1, model.parameters()))
            update = client_compute(
                model, cid, client_x[cid][rows], client_t[cid][rows], config.client_lr,
                update_kind, batches,
            )
            log.send(Message(update_msg_kind, round_idx, cid + 1, SERVER_ID, update.payload))
            updates.append(update)
        if update_kind == "gradient":
            aggregate_fedsgd(model, updates, config.client_lr * config.server_lr)
        else:
            aggregate_fedavg(model, updates, config.server_lr)
        for u in updates:
            loss_trace.extend(u.losses)
        round_bytes = sum(e.n_bytes for e in log.entries[log_start:])
        history.append(RoundRecord(round_idx, [u.client_id for u in updates], round_bytes, None, None))
        round_idx += 1

    for epoch in range(config.max_epochs):
        if fine:
            batches = [epoch_batches(client_scheds[c], len(client_x[c]), config.batch_size) for c in range(k)]
            cursors = [0] * k
            while True:
                pending = [c for c in range(k) if cursors[c] < len(batches[c])]
                if not pending:
                    break
                selected = select_clients(pending, config.client_fraction, select_rng)
                units = []
                for cid in selected:
                    units.append((cid, batches[cid][cursors[cid]], None))
                    cursors[cid] += 1
                run_round(units)
        else:
            selected = select_clients(list(range(k)), config.client_fraction, select_rng)
            units = [
                (cid, np.arange(len(client_x[cid])),
                 epoch_batches(client_scheds[cid], len(client_x[cid]), config.batch_size))
                for cid in selected
            ]
            run_round(units)

        val_loss, val_auc = evaluate_model(model, val)
        history[-1].val_loss = val_loss
        history[-1].val_mean_auc = val_auc
        epoch_aucs.append(val_auc)
        decision = metrics.early_stop(epoch_aucs, patience=config.patience, max_epochs=config.max_epochs)
        if decision.best_epoch == epoch:
            best = model.copy()
        if decision.stop:
            break

    return FederatedResult(
        model=best,
        final_model=model,
        history=history,
        epoch_aucs=epoch_aucs,
        best_epoch=decision.best_epoch,
        loss_trace=loss_trace,
        comm=log,
        aggregator_used=aggregator,
    )
