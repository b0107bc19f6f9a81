"""Split learning engine: vanilla and U-shaped layouts.

One shared server segment is trained on every client's traffic while each
client keeps a private front segment (and, in the U-shaped layout, a private
back segment holding the output head, so labels never leave the client).
Because segments run the same floating-point ops in the same order as the
unsplit network, a single-client run is bitwise-identical to monolithic SGD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, nn
from .data import Dataset, LabelPolicy, PartitionPlan, resolve_plan, smooth_labels
from .errors import ConfigError, PrivacyError, ProtocolError
from .simnet import SERVER_ID, CommLog, Message, MessageKind
from .training import RoundRecord, epoch_batches, evaluate_scores, run_streams

LAYOUTS = ("vanilla", "ushaped")


@dataclass
class SplitConfig:
    layout: str = "vanilla"
    cut_m: int = 1
    cut_n: int | None = None  # U-shaped only
    granularity: str = "fine"
    client_order: list[int] | None = None  # defaults to 0..K-1
    client_lr: float = 1e-3
    batch_size: int = 1
    max_epochs: int = 10
    patience: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.layout == "ushaped" and self.cut_n is None:
            raise ConfigError("the U-shaped layout needs cut_n")
        if self.layout == "vanilla" and self.cut_n is not None:
            raise ConfigError("cut_n only applies to the U-shaped layout")
        if self.granularity not in ("fine", "coarse"):
            raise ConfigError(f"granularity must be fine or coarse, got {self.granularity!r}")
        if self.client_lr <= 0.0:
            raise ConfigError("client_lr must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("need max_epochs >= 0 and patience >= 1")


@dataclass(eq=False)
class SplitState:
    """Live segments of one run: a single shared server instance plus
    per-client fronts (and backs for the U-shaped layout). Front and back
    segments are never exchanged between clients."""

    layout: str
    server: nn.SequentialModel
    fronts: list[nn.SequentialModel]
    backs: list[nn.SequentialModel] | None
    cursors: list[int]


def send_label_free(log: CommLog, message: Message):
    """Transport guard for the label-private layout: refuse to serialize
    targets toward the server."""
    if message.receiver == SERVER_ID and message.carries_targets:
        raise PrivacyError("server-bound message would carry targets")
    return log.send(message)


def vanilla_step(
    state: SplitState,
    client_id: int,
    x: np.ndarray,
    targets: np.ndarray,
    lr: float,
    log: CommLog,
    turn: int,
) -> float:
    """One batch under the vanilla layout: the server holds the output head,
    so the cut-layer activations travel together with the batch targets."""
    if state.layout != "vanilla":
        raise ProtocolError(f"vanilla_step on a {state.layout!r} state")
    front = state.fronts[client_id]
    endpoint = client_id + 1

    cut_out, front_cache = nn.forward(front, x)
    log.send(Message(MessageKind.ACTIVATION, turn, endpoint, SERVER_ID,
                     [cut_out, targets], carries_targets=True))

    y_hat, server_cache = nn.forward(state.server, cut_out)
    loss, dloss = nn.bce_loss(y_hat, targets)
    server_grads = nn.backward(state.server, server_cache, dloss)
    nn.sgd_step(state.server, server_grads, lr)
    log.send(Message(MessageKind.GRADIENT, turn, SERVER_ID, endpoint, [server_grads.input_grad]))

    front_grads = nn.backward(front, front_cache, server_grads.input_grad)
    nn.sgd_step(front, front_grads, lr)
    return loss


def ushaped_step(
    state: SplitState,
    client_id: int,
    x: np.ndarray,
    targets: np.ndarray,
    lr: float,
    log: CommLog,
    turn: int,
) -> float:
    """One batch under the U-shaped layout: loss and output head stay on the
    client; only activations and gradients cross the cut boundaries."""
    if state.layout != "ushaped":
        raise ProtocolError(f"ushaped_step on a {state.layout!r} state")
    front = state.fronts[client_id]
    back = state.backs[client_id]
    endpoint = client_id + 1

    cut_out, front_cache = nn.forward(front, x)
    send_label_free(log, Message(MessageKind.ACTIVATION, turn, endpoint, SERVER_ID, [cut_out]))

    mid_out, server_cache = nn.forward(state.server, cut_out)
    log.send(Message(MessageKind.ACTIVATION, turn, SERVER_ID, endpoint, [mid_out]))

    y_hat, back_cache = nn.forward(back, mid_out)
    loss, dloss = nn.bce_loss(y_hat, targets)

    back_grads = nn.backward(back, back_cache, dloss)
    nn.sgd_step(back, back_grads, lr)
    send_label_free(log, Message(MessageKind.GRADIENT, turn, endpoint, SERVER_ID,
                                 [back_grads.input_grad]))

    server_grads = nn.backward(state.server, server_cache, back_grads.input_grad)
    nn.sgd_step(state.server, server_grads, lr)
    log.send(Message(MessageKind.GRADIENT, turn, SERVER_ID, endpoint, [server_grads.input_grad]))

    front_grads = nn.backward(front, front_cache, server_grads.input_grad)
    nn.sgd_step(front, front_grads, lr)
    return loss


def ensemble_predict(
    fronts: list[nn.SequentialModel],
    server: nn.SequentialModel,
    x: np.ndarray,
    backs: list[nn.SequentialModel] | None = None,
) -> np.ndarray:
    """Mean over clients of each client's full-path prediction."""
    if not fronts:
        raise ConfigError("ensemble needs at least one client model")
    preds = []
    for i, front in enumerate(fronts):
        h = nn.predict(server, nn.predict(front, x))
        if backs is not None:
            h = nn.predict(backs[i], h)
        preds.append(h)
    return np.mean(np.stack(preds), axis=0)


@dataclass(eq=False)
class SplitResult:
    fronts: list[nn.SequentialModel]  # best-epoch checkpoints
    backs: list[nn.SequentialModel] | None
    server: nn.SequentialModel
    final_fronts: list[nn.SequentialModel]
    final_backs: list[nn.SequentialModel] | None
    final_server: nn.SequentialModel
    history: list[RoundRecord]
    epoch_aucs: list[float]
    best_epoch: int | None
    loss_trace: list[float]
    comm: CommLog


def run_split(
    config: SplitConfig,
    train: Dataset,
    plan: PartitionPlan,
    model_init: nn.SequentialModel,
    val: Dataset,
    policy: LabelPolicy | None = None,
) -> SplitResult:
    """Train under the split protocol until early stopping or max_epochs.

    Fine granularity: clients take strict round-robin turns of one batch each
    until every shard is exhausted. Coarse: each client trains its whole shard
    before the next client starts. The server segment persists across all
    turns; early stopping watches the ensemble's validation mean AUC.
    """
    k = plan.num_clients
    order = list(config.client_order) if config.client_order is not None else list(range(k))
    if sorted(order) != list(range(k)):
        raise ConfigError(f"client_order must be a permutation of 0..{k - 1}, got {order}")

    part = nn.split_model(model_init, config.cut_m, config.cut_n)
    ushaped = config.layout == "ushaped"
    state = SplitState(
        layout=config.layout,
        server=(part.middle if ushaped else part.back).copy(),
        fronts=[part.front.copy() for _ in range(k)],
        backs=[part.back.copy() for _ in range(k)] if ushaped else None,
        cursors=[0] * k,
    )
    step = ushaped_step if ushaped else vanilla_step
    log = CommLog()

    def checkpoint():
        return (
            [m.copy() for m in state.fronts],
            [m.copy() for m in state.backs] if ushaped else None,
            state.server.copy(),
        )

    if config.max_epochs == 0:
        fronts, backs, server = checkpoint()
        return SplitResult(fronts, backs, server, state.fronts, state.backs, state.server,
                           [], [], None, [], log)

    smoothing_rng, scheds, _ = run_streams(config.seed, k)
    targets = smooth_labels(train.labels, policy or LabelPolicy(), smoothing_rng)
    clients = resolve_plan(train, plan)
    client_x = [train.features[c.rows] for c in clients]
    client_t = [targets[c.rows] for c in clients]

    history: list[RoundRecord] = []
    epoch_aucs: list[float] = []
    loss_trace: list[float] = []
    best = checkpoint()
    decision = None
    turn = 0

    for epoch in range(config.max_epochs):
        log_start = len(log)
        batches = [epoch_batches(scheds[c], len(client_x[c]), config.batch_size) for c in range(k)]
        state.cursors = [0] * k
        if config.granularity == "fine":
            while any(state.cursors[c] < len(batches[c]) for c in range(k)):
                for cid in order:
                    cursor = state.cursors[cid]
                    if cursor >= len(batches[cid]):
                        continue
                    log.send(Message(MessageKind.CONTROL, turn, SERVER_ID, cid + 1))
                    rows = batches[cid][cursor]
                    state.cursors[cid] = cursor + 1
                    loss = step(state, cid, client_x[cid][rows], client_t[cid][rows],
                                config.client_lr, log, turn)
                    loss_trace.append(loss)
                    turn += 1
        else:
            for cid in order:
                log.send(Message(MessageKind.CONTROL, turn, SERVER_ID, cid + 1))
                for rows in batches[cid]:
                    loss = step(state, cid, client_x[cid][rows], client_t[cid][rows],
                                config.client_lr, log, turn)
                    loss_trace.append(loss)
                state.cursors[cid] = len(batches[cid])
                turn += 1

        scores = ensemble_predict(state.fronts, state.server, val.features, state.backs)
        val_loss, val_auc = evaluate_scores(scores, val)
        epoch_bytes = sum(e.n_bytes for e in log.entries[log_start:])
        history.append(RoundRecord(epoch, list(range(k)), epoch_bytes, val_loss, val_auc))
        epoch_aucs.append(val_auc)
        decision = metrics.early_stop(epoch_aucs, patience=config.patience, max_epochs=config.max_epochs)
        if decision.best_epoch == epoch:
            best = checkpoint()
        if decision.stop:
            break

    fronts, backs, server = best
    return SplitResult(
        fronts=fronts,
        backs=backs,
        server=server,
        final_fronts=state.fronts,
        final_backs=state.backs,
        final_server=state.server,
        history=history,
        epoch_aucs=epoch_aucs,
        best_epoch=decision.best_epoch,
        loss_trace=loss_trace,
        comm=log,
    )
