"""Federated aggregation protocol: framing, averaging accuracy, aborts."""

import json
import socket
import threading
from random import Random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hegemony.threshold_paillier as tp
from hegemony.errors import ProtocolError, RoundAbort
from hegemony.fedsim import (
    ClientSession,
    FaultPlan,
    FedConfig,
    FedServer,
    Message,
    QueueEndpoint,
    _checksum,
    _initial_weights,
    client_update_stub,
    connect,
    file_replay_provider,
    loopback_pair,
    run_simulation,
    secret_types_held,
    selection_schedule,
    serve,
    validate_message,
)
from hegemony.packing import PackingConfig

FAST = dict(key_bits=128, phase_timeout=30.0)


# -- framing ----------------------------------------------------------------


def test_message_round_trip():
    msg = Message("ModelUpload", 2, "client:1", {"chunks": ["ff"], "n": 3})
    raw = msg.to_bytes()
    assert int.from_bytes(raw[:4], "big") == len(raw) - 4
    assert Message.from_payload(raw[4:]) == msg


def test_message_rejects_unknown_kind():
    with pytest.raises(ProtocolError):
        Message("Gossip", 0, "x", {}).to_bytes()
    with pytest.raises(ProtocolError):
        Message.from_payload(b'{"kind":"Gossip","round":0,"sender":"x","body":{}}')
    with pytest.raises(ProtocolError):
        Message.from_payload(b"not json")
    with pytest.raises(ProtocolError):
        Message.from_payload(b'{"kind":"Hello"}')


def test_validate_message_guards():
    msg = Message("ModelUpload", 3, "client:2", {})
    validate_message(msg, kind="ModelUpload", round_index=3)
    with pytest.raises(ProtocolError):
        validate_message(msg, kind="Hello", round_index=3)
    with pytest.raises(ProtocolError):
        validate_message(msg, kind="ModelUpload", round_index=2)
    with pytest.raises(ProtocolError):
        validate_message(msg, kind="ModelUpload", round_index=3, senders={"client:0"})
    validate_message(msg, kind="ModelUpload", round_index=3, senders={"client:2"})


def test_loopback_carries_frames_both_ways():
    a, b = loopback_pair()
    a.send(Message("Hello", -1, "client:0", {"v": 1}))
    got = b.recv(timeout=1.0)
    assert got.kind == "Hello" and got.body == {"v": 1}
    b.send(Message("RoundComplete", 0, "server", {}))
    assert a.recv(timeout=1.0).sender == "server"


def test_loopback_recv_times_out():
    a, _b = loopback_pair()
    with pytest.raises(ProtocolError):
        a.recv(timeout=0.05)


# -- configuration ----------------------------------------------------------


def test_config_validation():
    FedConfig()
    with pytest.raises(ValueError):
        FedConfig(clients=1)
    with pytest.raises(ValueError):
        FedConfig(rounds=0)
    with pytest.raises(ValueError):
        FedConfig(client_fraction=0.0)
    with pytest.raises(ValueError):
        FedConfig(client_fraction=1.5)
    with pytest.raises(ValueError):
        FedConfig(key_bits=100)
    with pytest.raises(ValueError):
        FedConfig(key_bits=513)
    with pytest.raises(ValueError):
        FedConfig(learning_rate=-0.1)
    with pytest.raises(ValueError):
        FedConfig(n_weights=0)


def test_selected_per_round_floor():
    assert FedConfig(clients=4, client_fraction=0.5).selected_per_round == 2
    assert FedConfig(clients=3, client_fraction=0.1).selected_per_round == 1
    assert FedConfig(clients=3, client_fraction=1.0).selected_per_round == 3


def test_selection_schedule_shape():
    cfg = FedConfig(clients=5, rounds=4, client_fraction=0.6)
    sched = selection_schedule(cfg, 99)
    assert len(sched) == 4
    for sel in sched:
        assert len(sel) == 3 == len(set(sel))
        assert sel == sorted(sel)
        assert all(0 <= c < 5 for c in sel)
    assert sched == selection_schedule(cfg, 99)
    assert sched != selection_schedule(cfg, 100)


# -- local update stub ------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31),
    eta=st.floats(min_value=0.0, max_value=0.5, allow_nan=False),
    epochs=st.integers(min_value=1, max_value=4),
    batches=st.integers(min_value=1, max_value=4),
)
def test_stub_properties(seed, eta, epochs, batches):
    cfg = FedConfig(learning_rate=eta, local_epochs=epochs, batches_per_round=batches)
    prev = np.random.default_rng(seed).uniform(-1, 1, 20)
    out1 = client_update_stub(seed, prev, cfg)
    out2 = client_update_stub(seed, prev, cfg)
    assert np.array_equal(out1, out2)
    assert out1 is not prev
    assert np.max(np.abs(out1 - prev)) <= eta * epochs * batches + 1e-12
    if eta == 0.0:
        assert np.array_equal(out1, prev)


def test_file_replay_provider(tmp_path):
    w = np.arange(4, dtype=np.float64)
    np.save(tmp_path / "client1_round0.npy", w)
    provider = file_replay_provider(str(tmp_path))
    got = provider(1, 0, np.zeros(4))
    assert np.array_equal(got, w)
    np.save(tmp_path / "client2_round0.npy", np.zeros(3))
    with pytest.raises(ValueError):
        provider(2, 0, np.zeros(4))


def test_checksum_depends_on_inputs():
    a = _checksum(0, 3, [1, 2, 3])
    assert a == _checksum(0, 3, [1, 2, 3])
    assert a != _checksum(1, 3, [1, 2, 3])
    assert a != _checksum(0, 2, [1, 2, 3])
    assert a != _checksum(0, 3, [1, 2, 4])


# -- full simulations -------------------------------------------------------


def test_constant_vectors_average_exactly():
    cfg = FedConfig(clients=3, rounds=1, n_weights=1, seed=7, **FAST)

    def provider(client_id, round_index, previous):
        return np.full(1, float(client_id + 1))

    transcript = run_simulation(cfg, provider)
    assert len(transcript.averages) == 1
    assert abs(transcript.averages[0][0] - 2.0) <= 2 ** -16
    assert transcript.final_weights is not None
    assert not transcript.aborted
    assert len(transcript.rounds) == 1
    assert transcript.rounds[0].participants == [0, 1, 2]


def test_multi_round_matches_quantised_oracle():
    n = 50
    cfg = FedConfig(clients=3, rounds=2, n_weights=n, seed=11, **FAST)

    def provider(client_id, round_index, previous):
        step = np.random.default_rng([client_id, round_index]).uniform(-1, 1, n)
        return previous + step

    transcript = run_simulation(cfg, provider)
    assert len(transcript.averages) == 2
    prev = _initial_weights(11, n)
    schedule = selection_schedule(cfg, 11)
    for t in range(2):
        outs = [provider(c, t, prev) for c in schedule[t]]
        want = np.mean(outs, axis=0)
        err = np.max(np.abs(transcript.averages[t] - want))
        assert err <= 2 ** -16, (t, err)
        prev = transcript.averages[t]  # clients build on the committed average


def test_partial_participation():
    cfg = FedConfig(clients=4, rounds=2, client_fraction=0.5, n_weights=8, seed=13, **FAST)
    calls = []

    def provider(client_id, round_index, previous):
        calls.append((round_index, client_id))
        return np.full(8, float(client_id))

    transcript = run_simulation(cfg, provider)
    schedule = selection_schedule(cfg, 13)
    assert sorted(calls) == sorted((t, c) for t in range(2) for c in schedule[t])
    for t in range(2):
        want = float(np.mean(schedule[t]))
        assert transcript.averages[t] == pytest.approx([want] * 8, abs=2 ** -16)


def test_seeded_runs_reproduce():
    cfg = FedConfig(clients=2, rounds=1, n_weights=6, seed=21, **FAST)
    t1 = run_simulation(cfg)
    t2 = run_simulation(cfg)
    assert np.array_equal(t1.final_weights, t2.final_weights)


def test_tampered_partial_aborts():
    cfg = FedConfig(clients=2, rounds=2, n_weights=4, seed=17, **FAST)
    with pytest.raises(RoundAbort) as err:
        run_simulation(cfg, faults=FaultPlan(tamper_partial=(1, 0)))
    abort = err.value
    assert abort.round_index == 1
    assert "CombineFailed" in str(abort)
    transcript = abort.transcript
    assert transcript.aborted
    assert len(transcript.rounds) == 2
    assert transcript.rounds[0].abort is None
    assert transcript.rounds[1].abort


def test_skipped_partial_aborts():
    cfg = FedConfig(clients=2, rounds=1, n_weights=4, seed=19, **FAST)
    with pytest.raises(RoundAbort) as err:
        run_simulation(cfg, faults=FaultPlan(skip_partial=(0, 1)))
    assert err.value.round_index == 0
    assert "IncompleteShareSet" in str(err.value)


def test_over_capacity_aborts_before_upload():
    packing = PackingConfig(max_addends=2)
    cfg = FedConfig(clients=3, rounds=1, n_weights=4, seed=23, packing=packing, **FAST)
    with pytest.raises(RoundAbort) as err:
        run_simulation(cfg)
    assert "OverflowDetected" in str(err.value)
    transcript = err.value.transcript
    assert transcript.rounds and transcript.rounds[0].abort
    # the round never reached the upload phase
    assert not transcript.rounds[0].phases


# -- key custody ------------------------------------------------------------


def test_server_holds_no_secret_material():
    pub, shares = tp.ceremony_keygen(64, 2, Random(31))
    cfg = FedConfig(clients=2, **FAST)
    server = FedServer(cfg, pub, selection_schedule(cfg, 1), init_seed=1)
    assert secret_types_held(server) == set()
    end, _ = loopback_pair()
    session = ClientSession(0, end, share=shares[0])
    assert "ThresholdKeyShare" in secret_types_held(session)


def test_secret_walker_sees_nested_containers():
    _pub, shares = tp.ceremony_keygen(64, 2, Random(37))

    class Box:
        def __init__(self, inner):
            self.inner = inner

    assert secret_types_held(Box({"deep": [shares[0]]})) == {"ThresholdKeyShare"}
    assert secret_types_held(Box([1, "two", None])) == set()


# -- transcript serialisation ----------------------------------------------


def test_transcript_json_lines():
    cfg = FedConfig(clients=2, rounds=2, n_weights=6, seed=29, **FAST)
    transcript = run_simulation(cfg)
    objs = [json.loads(l) for l in transcript.to_json_lines()]
    phases = [o["phase"] for o in objs]
    assert phases[0] == "setup"
    assert phases[-1] == "total"
    assert phases.count("summary") == 2
    for name in ("local_update", "encrypt", "aggregate", "decrypt"):
        assert phases.count(name) == 2
    total = objs[-1]
    assert total["rounds_completed"] == 2
    assert total["aborted"] is None
    timed = [o for o in objs if o["phase"] in ("local_update", "encrypt", "aggregate", "decrypt")]
    phase_sum = sum(o["seconds"] for o in timed)
    assert 0 < phase_sum <= total["seconds"] * 1.05 + 0.05
    for o in timed:
        assert o["seconds"] >= 0
        assert set(o["by_client"]) <= {"0", "1"}
    summaries = [o for o in objs if o["phase"] == "summary"]
    assert all(o["checksum"] for o in summaries)
    assert all(o["abort"] is None for o in summaries)


def test_round_phase_seconds_accessor():
    cfg = FedConfig(clients=2, rounds=1, n_weights=4, seed=41, **FAST)
    transcript = run_simulation(cfg)
    phases = transcript.rounds[0].phase_seconds
    assert set(phases) == {"local_update", "encrypt", "aggregate", "decrypt"}
    assert all(v >= 0 for v in phases.values())


# -- TCP transport ----------------------------------------------------------


def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_tcp_round_trip(tmp_path):
    cfg = FedConfig(clients=2, rounds=1, n_weights=5, seed=43, **FAST)
    pub, shares = tp.ceremony_keygen(cfg.key_bits // 2, cfg.clients, Random(43))
    files = []
    for s in shares:
        path = tmp_path / f"share_{s.index}.json"
        path.write_text(s.to_json())
        files.append(str(path))

    address = ("127.0.0.1", _free_port())
    result: dict = {}

    def server_main():
        result["transcript"] = serve(address, cfg, pub)

    server_thread = threading.Thread(target=server_main, daemon=True)
    server_thread.start()

    sessions: list = [None, None]

    def client_main(cid):
        sessions[cid] = connect(address, files[cid], cid, timeout=30.0)

    client_threads = []
    import time

    time.sleep(0.2)  # let the listener come up
    for cid in range(2):
        th = threading.Thread(target=client_main, args=(cid,), daemon=True)
        th.start()
        client_threads.append(th)
    for th in client_threads:
        th.join(timeout=60.0)
    server_thread.join(timeout=60.0)

    transcript = result["transcript"]
    assert not transcript.aborted
    assert len(transcript.rounds) == 1
    assert sessions[0].error is None and sessions[1].error is None
    assert np.array_equal(sessions[0].model, sessions[1].model)
    # the same seeded run over loopback commits the identical model
    loopback = run_simulation(cfg)
    assert np.allclose(sessions[0].model, loopback.final_weights, atol=2 ** -15)
