import numpy as np
import pytest

from fedsplitsim.errors import ConfigError
from fedsplitsim.simnet import (
    SERVER_ID,
    CommLog,
    Message,
    MessageKind,
    comm_summary,
    payload_bytes,
)


def test_empty_payload_is_header_only():
    assert payload_bytes([]) == 24


def test_ten_element_tensor():
    assert payload_bytes([np.zeros(10)]) == 24 + 8 + 80


def test_multi_tensor_payload():
    assert payload_bytes([np.zeros((2, 3)), np.zeros(4)]) == 24 + (8 + 48) + (8 + 32)


def test_sequence_numbers_increase_by_one():
    log = CommLog()
    r1 = log.send(Message(MessageKind.CONTROL, 0, SERVER_ID, 1))
    r2 = log.send(Message(MessageKind.CONTROL, 0, 1, SERVER_ID))
    assert r2.seq - r1.seq == 1


def test_logged_size_recomputes_from_payload():
    log = CommLog()
    payload = [np.zeros((5, 7)), np.zeros(3)]
    receipt = log.send(Message(MessageKind.ACTIVATION, 2, 1, SERVER_ID, payload))
    assert receipt.n_bytes == payload_bytes(payload)


def test_invalid_endpoints_rejected():
    log = CommLog()
    with pytest.raises(ConfigError):
        log.send(Message(MessageKind.CONTROL, 0, -1, 1))
    with pytest.raises(ConfigError):
        log.send(Message(MessageKind.CONTROL, 0, 3, 3))


def test_summary_of_empty_log_is_zero():
    summary = comm_summary(CommLog())
    assert summary.total_bytes == 0
    assert summary.total_messages == 0
    assert summary.bytes_by_round == {}


def test_summary_additivity():
    log = CommLog()
    log.send(Message(MessageKind.ACTIVATION, 0, 1, SERVER_ID, [np.zeros(10)]))
    log.send(Message(MessageKind.CONTROL, 0, SERVER_ID, 1))
    summary = comm_summary(log)
    assert summary.total_bytes == 112 + 24 == 136
    assert summary.bytes_by_round == {0: 136}
    assert summary.messages_by_direction == {"to_server": 1, "to_client": 1}
    assert summary.bytes_by_direction["to_server"] == 112


def test_total_bytes_strictly_increase_per_send():
    log = CommLog()
    seen = [log.total_bytes]
    for i in range(5):
        log.send(Message(MessageKind.GRADIENT, i, 1, SERVER_ID, [np.zeros(i + 1)]))
        seen.append(log.total_bytes)
    assert all(b > a for a, b in zip(seen, seen[1:]))


def test_csv_round_trip_columns(tmp_path):
    log = CommLog()
    log.send(Message(MessageKind.ACTIVATION, 1, 2, SERVER_ID, [np.zeros(4)], carries_targets=True))
    path = tmp_path / "comm.csv"
    log.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "seq,round,kind,from,to,bytes,carries_targets"
    assert lines[1] == "0,1,activation,2,0,64,true"
