"""Federated averaging where the server only ever sees ciphertexts.

Each round, selected clients pack their weight vectors into big integers,
encrypt them under a shared threshold key, and upload.  The server
multiplies the ciphertexts mod n^2 (the additive homomorphism) and
broadcasts the still-encrypted sum.  Every share holder then produces a
partial decryption, the partials are relayed, and each client combines
them and divides by the participant count locally.  The server holds no
key share and never calls any decryption routine, so the only thing it
can learn is ciphertext traffic.

Messages are JSON bodies behind a 4-byte big-endian length prefix.  The
same client and server code runs over an in-process loopback (queues) or
TCP sockets; the loopback path still serializes every frame so both
transports exercise identical parsing.

Wire schema, by kind (round -1 marks handshake traffic):

* ``Hello``             client -> server: {"version", "client_id"}
* ``ShareDelivery``     dealer -> client: {"share": <key share JSON>}
* ``PublicKeyBroadcast``server -> client: {"version", "public_key",
  "packing", "schedule", "rounds", "clients", "n_weights", "init_seed"}
* ``ModelUpload``       client -> server: {"chunks": [hex], "count",
  "local_seconds", "encrypt_seconds"}
* ``AggregateBroadcast``server -> client: {"chunks": [hex],
  "participants": [ids], "count"}
* ``PartialDecryption`` client -> server: {"index", "values": [hex]};
  server -> client (relay): {"partials": {share index: [hex]}}
* ``RoundComplete``     client -> server: {"checksum", "decrypt_seconds"}
  or {"error"}; server -> client (commit): {"checksum"} or {"error"}
"""

from __future__ import annotations

import hashlib
import json
import queue
import secrets
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Mapping, Sequence

import numpy as np

from . import threshold_paillier as tp
from .errors import ProtocolError, RoundAbort
from .packing import PackingConfig, pack, plaintext_bits_for, unpack_sum
from .paillier import PaillierCiphertext

__all__ = [
    "PROTOCOL_VERSION",
    "MESSAGE_KINDS",
    "Message",
    "FedConfig",
    "FaultPlan",
    "PhaseRecord",
    "RoundRecord",
    "AggregationTranscript",
    "FedServer",
    "ClientSession",
    "client_update_stub",
    "file_replay_provider",
    "selection_schedule",
    "run_simulation",
    "serve",
    "connect",
    "loopback_pair",
    "validate_message",
    "secret_types_held",
]

PROTOCOL_VERSION = 1

MESSAGE_KINDS = (
    "Hello",
    "PublicKeyBroadcast",
    "ShareDelivery",
    "ModelUpload",
    "AggregateBroadcast",
    "PartialDecryption",
    "RoundComplete",
)

_HANDSHAKE_ROUND = -1


@dataclass(frozen=True)
class Message:
    kind: str
    round: int
    sender: str
    body: dict

    def to_bytes(self) -> bytes:
        if self.kind not in MESSAGE_KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        payload = json.dumps(
            {"kind": self.kind, "round": self.round, "sender": self.sender, "body": self.body},
            separators=(",", ":"),
        ).encode()
        return struct.pack(">I", len(payload)) + payload

    @classmethod
    def from_payload(cls, payload: bytes) -> "Message":
        try:
            obj = json.loads(payload)
            msg = cls(
                kind=str(obj["kind"]),
                round=int(obj["round"]),
                sender=str(obj["sender"]),
                body=dict(obj["body"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed message: {exc}") from None
        if msg.kind not in MESSAGE_KINDS:
            raise ProtocolError(f"unknown message kind {msg.kind!r}")
        return msg


def validate_message(
    msg: Message,
    *,
    kind: str,
    round_index: int,
    senders: set[str] | None = None,
) -> None:
    """Stale-message guard: wrong kind, wrong round, or unexpected sender."""
    if msg.kind != kind:
        raise ProtocolError(f"expected {kind}, got {msg.kind} from {msg.sender}")
    if msg.round != round_index:
        raise ProtocolError(
            f"{msg.kind} from {msg.sender} is for round {msg.round}, current round is {round_index}"
        )
    if senders is not None and msg.sender not in senders:
        raise ProtocolError(f"unexpected {msg.kind} from {msg.sender}")


# -- transports --------------------------------------------------------

class QueueEndpoint:
    """One side of an in-process channel; frames still round-trip as bytes."""

    def __init__(self, inbox: "queue.Queue[bytes]", outbox: "queue.Queue[bytes]"):
        self._inbox = inbox
        self._outbox = outbox

    def send(self, msg: Message) -> None:
        self._outbox.put(msg.to_bytes())

    def recv(self, timeout: float) -> Message:
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError(f"no message within {timeout:.1f} s") from None
        return Message.from_payload(frame[4:])

    def close(self) -> None:
        pass


def loopback_pair() -> tuple[QueueEndpoint, QueueEndpoint]:
    a: "queue.Queue[bytes]" = queue.Queue()
    b: "queue.Queue[bytes]" = queue.Queue()
    return QueueEndpoint(a, b), QueueEndpoint(b, a)


class SocketEndpoint:
    """Message framing over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()

    def send(self, msg: Message) -> None:
        with self._lock:
            self._sock.sendall(msg.to_bytes())

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                raise ProtocolError("peer closed the connection mid-frame")
            buf += chunk
        return buf

    def recv(self, timeout: float) -> Message:
        self._sock.settimeout(timeout)
        try:
            (length,) = struct.unpack(">I", self._read_exact(4))
            payload = self._read_exact(length)
        except socket.timeout:
            raise ProtocolError(f"no message within {timeout:.1f} s") from None
        return Message.from_payload(payload)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


# -- configuration -----------------------------------------------------

@dataclass
class FedConfig:
    clients: int = 3
    rounds: int = 1
    client_fraction: float = 1.0
    local_epochs: int = 1
    batches_per_round: int = 1
    learning_rate: float = 0.05
    key_bits: int = 512  # modulus size; each prime gets half
    packing: PackingConfig = field(default_factory=PackingConfig)
    n_weights: int = 100
    threads: int = 1
    phase_timeout: float = 60.0
    seed: int | None = None

    def __post_init__(self):
        if self.clients < 2:
            raise ValueError("need at least two clients")
        if self.rounds < 1 or self.n_weights < 1:
            raise ValueError("rounds and n_weights must be positive")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction must lie in (0, 1]")
        if self.local_epochs < 1 or self.batches_per_round < 1:
            raise ValueError("local_epochs and batches_per_round must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate cannot be negative")
        if self.key_bits < 128 or self.key_bits % 2:
            raise ValueError("key_bits must be an even number >= 128")
        if self.threads < 1:
            raise ValueError("threads must be positive")

    @property
    def selected_per_round(self) -> int:
        return max(int(self.client_fraction * self.clients), 1)


@dataclass(frozen=True)
class FaultPlan:
    """Deliberate misbehavior for exercising the abort paths.

    tamper_partial: (round, client) whose partial decryptions are corrupted.
    skip_partial: (round, client) who sends an empty partial set.
    """

    tamper_partial: tuple[int, int] | None = None
    skip_partial: tuple[int, int] | None = None


def selection_schedule(config: FedConfig, master_seed: int) -> list[list[int]]:
    """Client ids chosen for each round; max(C*K, 1) of them, without repeats."""
    rng = np.random.default_rng([master_seed, 2])
    m = config.selected_per_round
    return [
        sorted(int(c) for c in rng.choice(config.clients, size=m, replace=False))
        for _ in range(config.rounds)
    ]


def client_update_stub(seed, previous_weights, config: FedConfig) -> np.ndarray:
    """Stand-in for local training: E*B seeded gradient-like steps.

    Each step moves by at most the learning rate per weight, so the total
    drift is bounded by learning_rate * local_epochs * batches_per_round.
    Zero learning rate reproduces the input exactly.
    """
    w = np.array(previous_weights, dtype=np.float64, copy=True)
    if config.learning_rate == 0.0:
        return w
    rng = np.random.default_rng(seed)
    for _ in range(config.local_epochs * config.batches_per_round):
        w -= config.learning_rate * rng.uniform(-1.0, 1.0, w.shape)
    return w


def file_replay_provider(directory: str) -> Callable:
    """Update provider replaying saved vectors client{c}_round{t}.npy."""

    def provider(client_id: int, round_index: int, previous: np.ndarray) -> np.ndarray:
        path = f"{directory}/client{client_id}_round{round_index}.npy"
        w = np.load(path)
        if w.shape != np.shape(previous):
            raise ValueError(f"{path} has shape {w.shape}, expected {np.shape(previous)}")
        return w.astype(np.float64)

    return provider


# -- transcript --------------------------------------------------------

@dataclass
class PhaseRecord:
    round: int
    phase: str
    seconds: float
    by_client: dict[int, float] = field(default_factory=dict)


@dataclass
class RoundRecord:
    index: int
    participants: list[int]
    ciphertexts: dict[str, int]
    phases: list[PhaseRecord]
    checksum: str | None = None
    abort: str | None = None

    @property
    def phase_seconds(self) -> dict[str, float]:
        return {p.phase: p.seconds for p in self.phases}


@dataclass
class AggregationTranscript:
    clients: int
    rounds_planned: int
    key_bits: int
    setup_seconds: float = 0.0
    rounds: list[RoundRecord] = field(default_factory=list)
    averages: list[np.ndarray] = field(default_factory=list)  # not serialized
    total_seconds: float = 0.0
    aborted: str | None = None

    @property
    def final_weights(self) -> np.ndarray | None:
        return self.averages[-1] if self.averages else None

    def to_json_lines(self) -> list[str]:
        lines = [
            json.dumps(
                {
                    "phase": "setup",
                    "clients": self.clients,
                    "rounds_planned": self.rounds_planned,
                    "key_bits": self.key_bits,
                    "seconds": round(self.setup_seconds, 6),
                }
            )
        ]
        for rec in self.rounds:
            for ph in rec.phases:
                lines.append(
                    json.dumps(
                        {
                            "round": rec.index,
                            "phase": ph.phase,
                            "seconds": round(ph.seconds, 6),
                            "by_client": {str(k): round(v, 6) for k, v in sorted(ph.by_client.items())},
                        }
                    )
                )
            lines.append(
                json.dumps(
                    {
                        "round": rec.index,
                        "phase": "summary",
                        "participants": rec.participants,
                        "ciphertexts": rec.ciphertexts,
                        "checksum": rec.checksum,
                        "abort": rec.abort,
                    }
                )
            )
        lines.append(
            json.dumps(
                {
                    "phase": "total",
                    "seconds": round(self.total_seconds, 6),
                    "rounds_completed": sum(1 for r in self.rounds if r.abort is None),
                    "aborted": self.aborted,
                }
            )
        )
        return lines


def _checksum(round_index: int, count: int, totals: Sequence[int]) -> str:
    h = hashlib.sha256(f"{round_index}:{count}".encode())
    for t in totals:
        h.update(format(t, "x").encode() + b",")
    return h.hexdigest()[:16]


# -- client ------------------------------------------------------------

class _Abort(Exception):
    """Server told us the run is over; carries the reason."""


class ClientSession:
    """One share holder: uploads encrypted weights, co-decrypts aggregates.

    Runs the whole protocol against an endpoint; reusable over loopback or
    TCP.  ``share`` may be preloaded (TCP mode) or arrive as a
    ShareDelivery message before the public-key broadcast.
    """

    def __init__(
        self,
        client_id: int,
        endpoint,
        *,
        share: tp.ThresholdKeyShare | None = None,
        update_provider: Callable | None = None,
        threads: int = 1,
        timeout: float = 60.0,
        enc_seed: int | None = None,
        faults: FaultPlan | None = None,
    ):
        self.client_id = client_id
        self.endpoint = endpoint
        self.share = share
        self.update_provider = update_provider
        self.threads = threads
        self.timeout = timeout
        self.enc_seed = enc_seed
        self.faults = faults or FaultPlan()
        self.model: np.ndarray | None = None
        self.history: list[np.ndarray] = []  # committed average per round
        self.checksums: list[str] = []
        self.error: str | None = None

    # the protocol loop; returns the final model (also kept on .model)
    def run(self) -> np.ndarray | None:
        try:
            self._run()
        except _Abort as exc:
            self.error = str(exc)
        except ProtocolError as exc:
            self.error = f"ProtocolError: {exc}"
        return self.model

    def _recv(self, kind: str, round_index: int) -> Message:
        msg = self.endpoint.recv(self.timeout)
        if msg.kind == "RoundComplete" and "error" in msg.body:
            raise _Abort(msg.body["error"])
        validate_message(msg, kind=kind, round_index=round_index)
        return msg

    def _pool(self):
        return ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None

    def _run(self) -> None:
        me = str(self.client_id)
        self.endpoint.send(
            Message("Hello", _HANDSHAKE_ROUND, me, {"version": PROTOCOL_VERSION, "client_id": self.client_id})
        )
        setup = None
        while setup is None:
            msg = self.endpoint.recv(self.timeout)
            if msg.kind == "ShareDelivery":
                self.share = tp.ThresholdKeyShare.from_json(msg.body["share"])
                continue
            validate_message(msg, kind="PublicKeyBroadcast", round_index=_HANDSHAKE_ROUND)
            if msg.body["version"] != PROTOCOL_VERSION:
                raise ProtocolError(f"protocol version {msg.body['version']} != {PROTOCOL_VERSION}")
            setup = msg.body
        if self.share is None:
            raise ProtocolError("no key share delivered before the public key broadcast")

        pub = tp.ThresholdPublicKey.from_json(setup["public_key"])
        packing = PackingConfig.from_json_obj(setup["packing"])
        schedule: list[list[int]] = [list(map(int, r)) for r in setup["schedule"]]
        n_weights = int(setup["n_weights"])
        ptbits = plaintext_bits_for(pub.n)
        self.model = _initial_weights(int(setup["init_seed"]), n_weights)
        provider = self.update_provider or _stub_provider(
            int(setup["init_seed"]),
            FedConfig(
                clients=int(setup["clients"]),
                rounds=int(setup["rounds"]),
                n_weights=n_weights,
                learning_rate=float(setup["learning_rate"]),
                local_epochs=int(setup["local_epochs"]),
                batches_per_round=int(setup["batches_per_round"]),
            ),
        )

        for t in range(int(setup["rounds"])):
            if self.client_id in schedule[t]:
                t0 = time.perf_counter()
                w = np.asarray(provider(self.client_id, t, self.model), dtype=np.float64)
                if w.shape != (n_weights,):
                    raise ProtocolError(f"update provider returned shape {w.shape}")
                local_s = time.perf_counter() - t0

                t0 = time.perf_counter()
                ints = pack(w.tolist(), packing, ptbits)
                cts = self._encrypt_chunks(pub, ints, t)
                encrypt_s = time.perf_counter() - t0
                self.endpoint.send(
                    Message("ModelUpload", t, me, {
                        "chunks": [format(c.value, "x") for c in cts],
                        "count": n_weights,
                        "local_seconds": local_s,
                        "encrypt_seconds": encrypt_s,
                    })
                )

            agg = self._recv("AggregateBroadcast", t)
            chunks = [
                PaillierCiphertext(value=int(h, 16), key_fingerprint=pub.fingerprint)
                for h in agg.body["chunks"]
            ]
            m_count = int(agg.body["count"])

            t0 = time.perf_counter()
            values = self._partials(pub, chunks, t)
            decrypt_s = time.perf_counter() - t0
            self.endpoint.send(
                Message("PartialDecryption", t, me, {"index": self.share.index, "values": values})
            )

            relay = self._recv("PartialDecryption", t)
            t0 = time.perf_counter()
            try:
                totals = self._combine(pub, relay.body["partials"], len(chunks))
                avg = np.array(unpack_sum(totals, m_count, n_weights, packing, ptbits))
                checksum = _checksum(t, m_count, totals)
            except Exception as exc:  # reported to the server, which aborts the run
                decrypt_s += time.perf_counter() - t0
                self.endpoint.send(Message("RoundComplete", t, me, {
                    "error": f"{type(exc).__name__}: {exc}",
                    "decrypt_seconds": decrypt_s,
                }))
                raise _Abort(f"{type(exc).__name__}: {exc}") from None
            decrypt_s += time.perf_counter() - t0
            self.endpoint.send(Message("RoundComplete", t, me, {
                "checksum": checksum,
                "decrypt_seconds": decrypt_s,
            }))

            self._recv("RoundComplete", t)  # commit; an error body raises above
            self.model = avg
            self.history.append(avg)
            self.checksums.append(checksum)

    def _encrypt_chunks(self, pub, ints: list[int], round_index: int) -> list[PaillierCiphertext]:
        def one(item):
            idx, v = item
            rng = Random(f"{self.enc_seed}:{round_index}:{idx}") if self.enc_seed is not None else None
            return tp.encrypt(pub, v, rng)

        pool = self._pool()
        if pool is None:
            return [one(it) for it in enumerate(ints)]
        with pool:
            return list(pool.map(one, enumerate(ints)))

    def _partials(self, pub, chunks: list[PaillierCiphertext], t: int) -> list[str]:
        if self.faults.skip_partial == (t, self.client_id):
            return []
        pool = self._pool()
        fn = lambda ct: tp.partial_decrypt(pub, self.share, ct).value
        if pool is None:
            values = [fn(ct) for ct in chunks]
        else:
            with pool:
                values = list(pool.map(fn, chunks))
        if self.faults.tamper_partial == (t, self.client_id):
            values = [(v + 1) % pub.n_sq for v in values]
        return [format(v, "x") for v in values]

    def _combine(self, pub, partials: Mapping[str, list[str]], n_chunks: int) -> list[int]:
        by_index = {int(idx): [int(h, 16) for h in vals] for idx, vals in partials.items()}
        totals = []
        for j in range(n_chunks):
            parts = [
                tp.PartialDecryption(ceremony_id=pub.ceremony_id, index=i, value=vals[j])
                for i, vals in sorted(by_index.items())
            ]
            totals.append(tp.combine(pub, parts))
        return totals


def _initial_weights(init_seed: int, n_weights: int) -> np.ndarray:
    return np.random.default_rng([init_seed, 1]).uniform(-0.5, 0.5, n_weights)


def _stub_provider(init_seed: int, config: FedConfig) -> Callable:
    def provider(client_id: int, round_index: int, previous: np.ndarray) -> np.ndarray:
        return client_update_stub([init_seed, 3, round_index, client_id], previous, config)

    return provider


# -- server ------------------------------------------------------------

class FedServer:
    """Aggregation coordinator.  Holds the public key and ciphertexts only;
    there is deliberately no code path here that touches a key share,
    partial-decrypts, or combines."""

    def __init__(self, config: FedConfig, pub: tp.ThresholdPublicKey, schedule: list[list[int]], init_seed: int):
        self.config = config
        self.pub = pub
        self.schedule = schedule
        self.init_seed = init_seed
        self.transcript = AggregationTranscript(
            clients=config.clients, rounds_planned=config.rounds, key_bits=config.key_bits
        )

    def _collect(self, endpoints, kind: str, t: int, senders: list[int]) -> dict[int, Message]:
        got: dict[int, Message] = {}
        for cid in senders:
            msg = endpoints[cid].recv(self.config.phase_timeout)
            validate_message(msg, kind=kind, round_index=t, senders={str(cid)})
            if int(msg.sender) in got:
                raise ProtocolError(f"duplicate {kind} from {msg.sender}")
            got[int(msg.sender)] = msg
        return got

    def _abort(self, endpoints, t: int, reason: str, record: RoundRecord) -> RoundAbort:
        record.abort = reason
        self.transcript.rounds.append(record)
        self.transcript.aborted = reason
        for ep in endpoints.values():
            ep.send(Message("RoundComplete", t, "server", {"error": reason}))
        return RoundAbort(reason, round_index=t, transcript=self.transcript)

    def run(self, channels: Sequence) -> AggregationTranscript:
        cfg = self.config
        start = time.perf_counter()
        # connections arrive in arbitrary order; the Hello names the client
        endpoints: dict[int, object] = {}
        for ep in channels:
            msg = ep.recv(cfg.phase_timeout)
            validate_message(msg, kind="Hello", round_index=_HANDSHAKE_ROUND)
            if msg.body.get("version") != PROTOCOL_VERSION:
                raise ProtocolError(f"client {msg.sender} speaks protocol {msg.body.get('version')}")
            cid = int(msg.body["client_id"])
            if cid in endpoints or not 0 <= cid < cfg.clients:
                raise ProtocolError(f"bad or duplicate client id {cid}")
            endpoints[cid] = ep
        if len(endpoints) != cfg.clients:
            raise ProtocolError(f"expected {cfg.clients} clients, have {len(endpoints)}")
        setup_body = {
            "version": PROTOCOL_VERSION,
            "public_key": self.pub.to_json(),
            "packing": cfg.packing.to_json_obj(),
            "schedule": self.schedule,
            "rounds": cfg.rounds,
            "clients": cfg.clients,
            "n_weights": cfg.n_weights,
            "init_seed": self.init_seed,
            "learning_rate": cfg.learning_rate,
            "local_epochs": cfg.local_epochs,
            "batches_per_round": cfg.batches_per_round,
        }
        for ep in endpoints.values():
            ep.send(Message("PublicKeyBroadcast", _HANDSHAKE_ROUND, "server", setup_body))

        everyone = sorted(endpoints)
        for t in range(cfg.rounds):
            selected = self.schedule[t]
            record = RoundRecord(index=t, participants=list(selected), ciphertexts={}, phases=[])

            if len(selected) > cfg.packing.max_addends:
                raise self._abort(
                    endpoints, t, record=record,
                    reason=f"OverflowDetected: {len(selected)} uploads exceed the "
                           f"packed capacity of {cfg.packing.max_addends} addends",
                )

            try:
                uploads = self._collect(endpoints, "ModelUpload", t, selected)
            except ProtocolError as exc:
                raise self._abort(endpoints, t, reason=f"ProtocolError: {exc}", record=record)
            record.phases.append(PhaseRecord(t, "local_update",
                sum(m.body["local_seconds"] for m in uploads.values()),
                {c: m.body["local_seconds"] for c, m in uploads.items()}))
            record.phases.append(PhaseRecord(t, "encrypt",
                sum(m.body["encrypt_seconds"] for m in uploads.values()),
                {c: m.body["encrypt_seconds"] for c, m in uploads.items()}))

            t0 = time.perf_counter()
            agg: list[PaillierCiphertext] | None = None
            for cid in selected:
                chunks = [
                    PaillierCiphertext(value=int(h, 16), key_fingerprint=self.pub.fingerprint)
                    for h in uploads[cid].body["chunks"]
                ]
                if agg is None:
                    agg = chunks
                elif len(chunks) != len(agg):
                    raise self._abort(endpoints, t, record=record,
                                      reason=f"ProtocolError: client {cid} uploaded {len(chunks)} "
                                             f"chunks, expected {len(agg)}")
                else:
                    agg = [tp.add_ct(self.pub, a, b) for a, b in zip(agg, chunks)]
            record.phases.append(PhaseRecord(t, "aggregate", time.perf_counter() - t0))
            record.ciphertexts = {"uploaded": len(selected) * len(agg), "aggregate": len(agg)}

            agg_body = {
                "chunks": [format(c.value, "x") for c in agg],
                "participants": selected,
                "count": len(selected),
            }
            for ep in endpoints.values():
                ep.send(Message("AggregateBroadcast", t, "server", agg_body))

            # partials are opaque relay traffic here; only clients combine
            try:
                partial_msgs = self._collect(endpoints, "PartialDecryption", t, everyone)
            except ProtocolError as exc:
                raise self._abort(endpoints, t, reason=f"ProtocolError: {exc}", record=record)
            relay: dict[str, list[str]] = {}
            for cid in everyone:
                body = partial_msgs[cid].body
                if not body["values"]:
                    continue
                idx = str(int(body["index"]))
                if idx in relay:
                    raise self._abort(endpoints, t, record=record,
                                      reason=f"ProtocolError: duplicate share index {idx}")
                relay[idx] = body["values"]
            for ep in endpoints.values():
                ep.send(Message("PartialDecryption", t, "server", {"partials": relay}))

            try:
                completes = self._collect(endpoints, "RoundComplete", t, everyone)
            except ProtocolError as exc:
                raise self._abort(endpoints, t, reason=f"ProtocolError: {exc}", record=record)
            errors = {c: m.body["error"] for c, m in completes.items() if "error" in m.body}
            record.phases.append(PhaseRecord(t, "decrypt",
                sum(m.body.get("decrypt_seconds", 0.0) for m in completes.values()),
                {c: m.body.get("decrypt_seconds", 0.0) for c, m in completes.items()}))
            if errors:
                cid, err = sorted(errors.items())[0]
                raise self._abort(endpoints, t, reason=f"client {cid}: {err}", record=record)
            checksums = {m.body["checksum"] for m in completes.values()}
            if len(checksums) != 1:
                raise self._abort(endpoints, t, record=record,
                                  reason=f"ProtocolError: checksum divergence {sorted(checksums)}")
            record.checksum = checksums.pop()
            self.transcript.rounds.append(record)
            for ep in endpoints.values():
                ep.send(Message("RoundComplete", t, "server", {"checksum": record.checksum}))

        self.transcript.total_seconds = time.perf_counter() - start
        return self.transcript


def secret_types_held(obj, *, _seen=None) -> set[str]:
    """Names of secret-bearing types reachable from obj's attribute graph.

    Walks __dict__, mappings, and sequences.  Used to assert the server
    object graph never references a key share or a secret key.
    """
    from .paillier import PaillierSecretKey

    secret_types = (tp.ThresholdKeyShare, PaillierSecretKey)
    seen = _seen if _seen is not None else set()
    found: set[str] = set()
    stack = [obj]
    while stack:
        cur = stack.pop()
        if id(cur) in seen or isinstance(cur, (str, bytes, int, float, bool, type(None))):
            continue
        seen.add(id(cur))
        if isinstance(cur, secret_types):
            found.add(type(cur).__name__)
            continue
        if isinstance(cur, Mapping):
            stack.extend(cur.keys())
            stack.extend(cur.values())
        elif isinstance(cur, (list, tuple, set, frozenset)):
            stack.extend(cur)
        if hasattr(cur, "__dict__"):
            stack.extend(vars(cur).values())
    return found


# -- drivers -----------------------------------------------------------

def run_simulation(
    config: FedConfig,
    update_provider: Callable | None = None,
    *,
    faults: FaultPlan | None = None,
) -> AggregationTranscript:
    """Whole pipeline in one process over loopback channels.

    The dealer runs the key ceremony up front and pushes one ShareDelivery
    to each client; the server sees only the public key.  Raises RoundAbort
    (with the transcript attached) if any round fails.
    """
    master_seed = config.seed if config.seed is not None else secrets.randbits(63)
    t0 = time.perf_counter()
    key_rng = Random(master_seed) if config.seed is not None else None
    pub, shares = tp.ceremony_keygen(config.key_bits // 2, config.clients, key_rng)
    setup_seconds = time.perf_counter() - t0

    schedule = selection_schedule(config, master_seed)
    provider = update_provider or _stub_provider(master_seed, config)
    server_ends: list[QueueEndpoint] = []
    sessions: list[ClientSession] = []
    for cid in range(config.clients):
        server_end, client_end = loopback_pair()
        # dealer-to-client share handoff rides the same channel, pre-queued
        dealer_msg = Message("ShareDelivery", _HANDSHAKE_ROUND, "dealer",
                             {"share": shares[cid].to_json()})
        client_end._inbox.put(dealer_msg.to_bytes())
        server_ends.append(server_end)
        sessions.append(ClientSession(
            cid, client_end,
            update_provider=provider,
            threads=config.threads,
            timeout=config.phase_timeout,
            enc_seed=(master_seed * 1000003 + cid) if config.seed is not None else None,
            faults=faults,
        ))

    server = FedServer(config, pub, schedule, init_seed=master_seed)
    threads = [threading.Thread(target=s.run, daemon=True) for s in sessions]
    for th in threads:
        th.start()
    try:
        transcript = server.run(server_ends)
    except RoundAbort as abort:
        for th in threads:
            th.join(timeout=config.phase_timeout)
        abort.transcript.setup_seconds = setup_seconds
        abort.transcript.total_seconds = time.perf_counter() - t0
        raise
    for th in threads:
        th.join(timeout=config.phase_timeout)
    transcript.setup_seconds = setup_seconds
    transcript.averages = _round_averages(sessions)
    transcript.total_seconds = time.perf_counter() - t0
    return transcript


def _round_averages(sessions: list[ClientSession]) -> list[np.ndarray]:
    # the per-round committed models, cross-checked between clients
    history = sessions[0].history
    for s in sessions[1:]:
        if len(s.history) != len(history) or any(
            not np.array_equal(a, b) for a, b in zip(history, s.history)
        ):
            raise ProtocolError("clients committed different models")
    return list(history)


def serve(address: tuple[str, int], config: FedConfig, pub: tp.ThresholdPublicKey) -> AggregationTranscript:
    """TCP server: accept one connection per client, then run the rounds.

    Key shares never pass through here; clients load their own share files.
    """
    master_seed = config.seed if config.seed is not None else secrets.randbits(63)
    schedule = selection_schedule(config, master_seed)
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind(address)
    listener.listen(config.clients)
    listener.settimeout(config.phase_timeout)
    endpoints: list[SocketEndpoint] = []
    try:
        for _ in range(config.clients):
            sock, _addr = listener.accept()
            endpoints.append(SocketEndpoint(sock))
        server = FedServer(config, pub, schedule, init_seed=master_seed)
        return server.run(endpoints)
    finally:
        for ep in endpoints:
            ep.close()
        listener.close()


def connect(
    address: tuple[str, int],
    share_file: str,
    client_id: int,
    *,
    update_provider: Callable | None = None,
    threads: int = 1,
    timeout: float = 60.0,
) -> ClientSession:
    """TCP client: load the share, run the protocol, return the session."""
    with open(share_file) as fh:
        share = tp.ThresholdKeyShare.from_json(fh.read())
    sock = socket.create_connection(address, timeout=timeout)
    session = ClientSession(
        client_id, SocketEndpoint(sock),
        share=share, update_provider=update_provider, threads=threads, timeout=timeout,
    )
    session.run()
    sock.close()
    return session
