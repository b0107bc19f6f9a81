"""In-process message transport with exact per-message byte accounting.

Delivery is immediate, lossless and FIFO; the point is the ledger, not the
network. Byte sizes are always recomputed from payload shapes, never guessed.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SERVER_ID = 0

HEADER_BYTES = 24
TENSOR_PREFIX_BYTES = 8
BYTES_PER_ELEMENT = 8  # 64-bit floats throughout


class MessageKind(enum.Enum):
    ACTIVATION = "activation"
    GRADIENT = "gradient"
    WEIGHTS = "weights"
    CONTROL = "control"


def payload_bytes(payload) -> int:
    """Size of a message: fixed header plus a length-prefixed 8-byte-per-element
    encoding of every payload tensor."""
    total = HEADER_BYTES
    for tensor in payload:
        total += TENSOR_PREFIX_BYTES + BYTES_PER_ELEMENT * int(np.asarray(tensor).size)
    return total


@dataclass(eq=False)
class Message:
    kind: MessageKind
    round: int
    sender: int
    receiver: int
    payload: list[np.ndarray] = field(default_factory=list)
    carries_targets: bool = False


@dataclass(frozen=True)
class LogEntry:
    """Receipt for one delivered message; payload itself is not retained."""

    seq: int
    round: int
    kind: MessageKind
    sender: int
    receiver: int
    n_bytes: int
    carries_targets: bool


class CommLog:
    """Append-only ordered record of every simulated message."""

    def __init__(self) -> None:
        self.entries: list[LogEntry] = []

    def send(self, message: Message) -> LogEntry:
        if message.sender < 0 or message.receiver < 0:
            raise ConfigError(f"invalid endpoints {message.sender} -> {message.receiver}")
        if message.sender == message.receiver:
            raise ConfigError(f"endpoint {message.sender} cannot message itself")
        entry = LogEntry(
            seq=len(self.entries),
            round=message.round,
            kind=message.kind,
            sender=message.sender,
            receiver=message.receiver,
            n_bytes=payload_bytes(message.payload),
            carries_targets=message.carries_targets,
        )
        self.entries.append(entry)
        return entry

    @property
    def total_bytes(self) -> int:
        return sum(e.n_bytes for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["seq", "round", "kind", "from", "to", "bytes", "carries_targets"])
            for e in self.entries:
                writer.writerow(
                    [e.seq, e.round, e.kind.value, e.sender, e.receiver, e.n_bytes,
                     str(e.carries_targets).lower()]
                )


@dataclass
class CommSummary:
    total_bytes: int
    total_messages: int
    bytes_by_round: dict[int, int]
    messages_by_round: dict[int, int]
    bytes_by_direction: dict[str, int]
    messages_by_direction: dict[str, int]


def comm_summary(log: CommLog) -> CommSummary:
    """Aggregate the log per round and per direction (toward or from the server)."""
    bytes_by_round: dict[int, int] = {}
    messages_by_round: dict[int, int] = {}
    bytes_by_direction = {"to_server": 0, "to_client": 0}
    messages_by_direction = {"to_server": 0, "to_client": 0}
    for e in log:
        bytes_by_round[e.round] = bytes_by_round.get(e.round, 0) + e.n_bytes
        messages_by_round[e.round] = messages_by_round.get(e.round, 0) + 1
        direction = "to_server" if e.receiver == SERVER_ID else "to_client"
        bytes_by_direction[direction] += e.n_bytes
        messages_by_direction[direction] += 1
    return CommSummary(
        total_bytes=log.total_bytes,
        total_messages=len(log),
        bytes_by_round=bytes_by_round,
        messages_by_round=messages_by_round,
        bytes_by_direction=bytes_by_direction,
        messages_by_direction=messages_by_direction,
    )
