"""Single-round wire protocol: seed schedule, messages, byte accounting.

Every message starts with a 6-byte header::

    b"CDM1" | version u8 (=1) | type u8 (1 = seed batch, 2 = client payload)

Seed batch (server -> client)::

    header | client u32 | count u32 | count x (round u32, seed u64)

Client payload (client -> server)::

    header | client u32 | rounds u32 | classes u32 | embedding_dim u32
           | synthetic_len u32 | synthetic set (synthetic_len bytes)
           | per round: round u32 | presence mask (ceil(classes / 8) bytes, LSB first)
                        | per present class, ascending: batch u32 | mean f32 x embedding_dim

All integers and floats are little-endian. Unused mask bits must be zero
and rounds strictly increase, so each value has exactly one encoding.
"""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import SyntheticSet
from .errors import (BadMagicError, ConfigError, DecodeError, DuplicateEntryError,
                     PresenceMismatchError, TruncatedError)
from .kernel import RngStream

MAGIC = b"CDM1"
VERSION = 1
MSG_SEEDS = 1
MSG_PAYLOAD = 2
HEADER_BYTES = 6
SEED_HEADER_BYTES = HEADER_BYTES + 8
PAYLOAD_HEADER_BYTES = HEADER_BYTES + 20
ROUND_ID_BYTES = 4


def participants(epsilon: float, K: int) -> int:
    """``ceil(epsilon * K)``, robust to float noise such as 0.3 * 10."""
    return max(1, min(K, math.ceil(round(epsilon * K, 9))))


@dataclass(frozen=True)
class SeedSchedule:
    master_seed: int
    T: int
    K: int
    epsilon: float
    alphas: tuple
    members: tuple  # members[t - 1] is the sorted tuple Z_t

    def alpha(self, t: int) -> int:
        return self.alphas[t - 1]

    def clients(self, t: int) -> tuple:
        return self.members[t - 1]

    def seed_batch(self, k: int):
        """``[(t, alpha_t) for every round t with k in Z_t]``, t increasing."""
        return [(t, self.alphas[t - 1]) for t in range(1, self.T + 1)
                if k in self.members[t - 1]]


def build_schedule(master_seed: int, T: int, K: int, epsilon: float = 1.0) -> SeedSchedule:
    """Pre-commit encoder seeds and participating clients for rounds ``1..T``.

    ``alpha_t`` is word ``t - 1`` of ``RngStream(master).substream("alpha")``;
    ``Z_t`` is the sorted prefix of size ``ceil(epsilon * K)`` of a forward
    Fisher-Yates shuffle driven by ``substream("clients", t)``.
    """
    if not 0 < epsilon <= 1:
        raise ConfigError(f"epsilon must lie in (0, 1], got {epsilon}")
    if T < 0 or K < 1:
        raise ConfigError("T must be >= 0 and K >= 1")
    root = RngStream(master_seed)
    alphas = tuple(int(a) for a in root.substream("alpha").bits(T))
    m = participants(epsilon, K)
    members = tuple(tuple(sorted(int(v) for v in root.substream("clients", t).sample(K, m)))
                    for t in range(1, T + 1))
    return SeedSchedule(int(master_seed), int(T), int(K), float(epsilon), alphas, members)


@dataclass(frozen=True)
class SeedBatch:
    client_id: int
    entries: tuple = ()  # ((t, alpha), ...)

    def __post_init__(self):
        rounds = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(rounds, rounds[1:])):
            raise ConfigError("seed batch rounds must strictly increase")


@dataclass(eq=False)
class ClientPayload:
    """Uplink message: local synthetic set plus per-round class means.

    ``means`` maps ``(t, y)`` to ``(vector, batch_size)`` for present pairs
    only; a pair absent from ``means`` has presence bit 0.
    """

    client_id: int
    synthetic: SyntheticSet
    rounds: tuple
    num_classes: int
    embedding_dim: int
    means: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ClientPayload):
            return NotImplemented
        if (self.client_id, tuple(self.rounds), self.num_classes, self.embedding_dim) != (
                other.client_id, tuple(other.rounds), other.num_classes, other.embedding_dim):
            return False
        if self.synthetic != other.synthetic or self.means.keys() != other.means.keys():
            return False
        return all(self.means[k][1] == other.means[k][1]
                   and np.array_equal(np.asarray(self.means[k][0], np.float32),
                                      np.asarray(other.means[k][0], np.float32))
                   for k in self.means)

    def present(self, t: int, y: int) -> bool:
        return (t, y) in self.means

    def presence_count(self) -> int:
        return len(self.means)


def _header(kind: int) -> bytes:
    return MAGIC + struct.pack("<BB", VERSION, kind)


def _read_header(buf, kind: int):
    if len(buf) < HEADER_BYTES:
        raise TruncatedError("message header truncated")
    if bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    version, got = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise DecodeError(f"unsupported protocol version {version}")
    if got != kind:
        raise DecodeError(f"expected message type {kind}, got {got}")


def message_type(buf) -> int:
    buf = memoryview(buf)
    if len(buf) < HEADER_BYTES:
        raise TruncatedError("message header truncated")
    if bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    return buf[5]


def encode_seed_batch(batch: SeedBatch) -> bytes:
    out = [_header(MSG_SEEDS), struct.pack("<II", batch.client_id, len(batch.entries))]
    out += [struct.pack("<IQ", t, alpha) for t, alpha in batch.entries]
    return b"".join(out)


def decode_seed_batch(buf) -> SeedBatch:
    buf = memoryview(buf)
    _read_header(buf, MSG_SEEDS)
    if len(buf) < SEED_HEADER_BYTES:
        raise TruncatedError("seed batch header truncated")
    client, count = struct.unpack_from("<II", buf, HEADER_BYTES)
    need = SEED_HEADER_BYTES + 12 * count
    if len(buf) < need:
        raise TruncatedError(f"seed batch truncated: need {need} bytes, have {len(buf)}")
    if len(buf) > need:
        raise DecodeError(f"{len(buf) - need} trailing bytes after seed batch")
    entries = [struct.unpack_from("<IQ", buf, SEED_HEADER_BYTES + 12 * i) for i in range(count)]
    rounds = [t for t, _ in entries]
    if len(set(rounds)) != len(rounds):
        raise DuplicateEntryError("seed batch repeats a round")
    if rounds != sorted(rounds):
        raise DecodeError("seed batch rounds are not increasing")
    return SeedBatch(client, tuple(entries))


def mask_bytes(num_classes: int) -> int:
    return (num_classes + 7) // 8


def encode_payload(payload: ClientPayload) -> bytes:
    rounds = list(payload.rounds)
    if any(b <= a for a, b in zip(rounds, rounds[1:])):
        raise ConfigError("payload rounds must strictly increase")
    for t, y in payload.means:
        if t not in payload.rounds or not 0 <= y < payload.num_classes:
            raise ConfigError(f"mean entry {(t, y)} outside the payload's rounds/classes")
    syn = payload.synthetic.to_bytes()
    out = [_header(MSG_PAYLOAD),
           struct.pack("<IIIII", payload.client_id, len(rounds), payload.num_classes,
                       payload.embedding_dim, len(syn)),
           syn]
    nmask = mask_bytes(payload.num_classes)
    for t in rounds:
        present = [y for y in range(payload.num_classes) if (t, y) in payload.means]
        bits = 0
        for y in present:
            bits |= 1 << y
        out.append(struct.pack("<I", t) + bits.to_bytes(nmask, "little"))
        for y in present:
            vec, n = payload.means[(t, y)]
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (payload.embedding_dim,):
                raise ConfigError(f"mean {(t, y)} has shape {vec.shape}, expected "
                                  f"({payload.embedding_dim},)")
            out.append(struct.pack("<I", n) + vec.tobytes())
    return b"".join(out)


def decode_payload(buf, dtype=np.float32) -> ClientPayload:
    buf = memoryview(buf)
    _read_header(buf, MSG_PAYLOAD)
    if len(buf) < PAYLOAD_HEADER_BYTES:
        raise TruncatedError("payload header truncated")
    client, nrounds, nclasses, dim, synlen = struct.unpack_from("<IIIII", buf, HEADER_BYTES)
    pos = PAYLOAD_HEADER_BYTES
    if len(buf) - pos < synlen:
        raise TruncatedError("synthetic set truncated")
    syn, end = SyntheticSet.from_bytes(buf[:pos + synlen], pos, dtype=dtype)
    if end != pos + synlen:
        raise DecodeError("synthetic-set length field disagrees with its content")
    pos = end
    nmask = mask_bytes(nclasses)
    vec_bytes = 4 * dim
    rounds, means, seen = [], {}, set()
    for _ in range(nrounds):
        if len(buf) - pos < ROUND_ID_BYTES + nmask:
            raise TruncatedError("round record truncated")
        (t,) = struct.unpack_from("<I", buf, pos)
        bits = int.from_bytes(buf[pos + 4:pos + 4 + nmask], "little")
        pos += ROUND_ID_BYTES + nmask
        if t in seen:
            raise DuplicateEntryError(f"round {t} appears twice")
        if rounds and t < rounds[-1]:
            raise DecodeError("rounds are not increasing")
        seen.add(t)
        if bits >> nclasses:
            raise PresenceMismatchError(f"round {t}: presence bits set beyond class {nclasses - 1}")
        rounds.append(t)
        for y in range(nclasses):
            if not bits >> y & 1:
                continue
            if len(buf) - pos < 4 + vec_bytes:
                raise PresenceMismatchError(
                    f"presence bit set for (round {t}, class {y}) but its mean is missing")
            (n,) = struct.unpack_from("<I", buf, pos)
            vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos + 4).astype(np.float32)
            means[(t, y)] = (vec, n)
            pos += 4 + vec_bytes
    if pos != len(buf):
        raise PresenceMismatchError(f"{len(buf) - pos} bytes of mean data not covered "
                                    "by the presence masks")
    return ClientPayload(client, syn, tuple(rounds), nclasses, dim, means)


def payload_bytes(T_k: int, num_classes: int, embedding_dim: int, synthetic_bytes: int,
                  presence_counts) -> int:
    """Exact encoded size of a client payload.

    ``presence_counts`` is the number of present (round, class) pairs, or an
    iterable of per-round counts.
    """
    present = presence_counts if isinstance(presence_counts, int) else sum(presence_counts)
    per_round = ROUND_ID_BYTES + mask_bytes(num_classes)
    return (PAYLOAD_HEADER_BYTES + synthetic_bytes + T_k * per_round
            + present * (4 * embedding_dim + 4))


def seed_batch_bytes(count: int) -> int:
    return SEED_HEADER_BYTES + 12 * count


# message tracing

@dataclass(frozen=True)
class TraceEvent:
    direction: str  # "down" (server -> client) or "up"
    client_id: int
    kind: str
    nbytes: int
    phase: str


class ProtocolTrace:
    """Append-only record of every message that crossed the client/server boundary."""

    def __init__(self):
        self._events = []
        self._lock = threading.Lock()
        self.phase = "collect"

    def record(self, direction, client_id, kind, nbytes):
        if self.phase == "refine":
            raise RuntimeError("no messages may be exchanged during server refinement")
        with self._lock:
            self._events.append(TraceEvent(direction, client_id, kind, nbytes, self.phase))

    @property
    def events(self):
        with self._lock:
            return tuple(self._events)

    def count(self, direction=None, client_id=None, phase=None) -> int:
        return sum(1 for e in self.events
                   if (direction is None or e.direction == direction)
                   and (client_id is None or e.client_id == client_id)
                   and (phase is None or e.phase == phase))

    def audit(self, K: int, expect_uplink=True):
        """Raise unless each client saw exactly one downlink and (optionally) one uplink."""
        for k in range(K):
            down, up = self.count("down", k), self.count("up", k)
            if down != 1 or up != (1 if expect_uplink else 0):
                raise AssertionError(f"client {k}: {down} downlink / {up} uplink messages")
        if self.count(phase="refine"):
            raise AssertionError("messages recorded during server refinement")
        if self.count() != K * (2 if expect_uplink else 1):
            raise AssertionError("messages recorded for unknown clients")


class Channel:
    """In-process transport: passes encoded bytes and logs them.

    With ``directory`` set, every message is also written there as
    ``seeds_<k>.cdm`` / ``payload_<k>.cdm``.
    """

    def __init__(self, trace: ProtocolTrace | None = None, directory=None):
        self.trace = trace or ProtocolTrace()
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _send(self, direction, client_id, kind, data: bytes) -> bytes:
        self.trace.record(direction, client_id, kind, len(data))
        if self.directory is not None:
            name = "seeds" if kind == "seed_batch" else "payload"
            (self.directory / f"{name}_{client_id}.cdm").write_bytes(data)
        return data

    def send_seeds(self, batch: SeedBatch) -> bytes:
        return self._send("down", batch.client_id, "seed_batch", encode_seed_batch(batch))

    def send_payload(self, payload: ClientPayload) -> bytes:
        return self._send("up", payload.client_id, "payload", encode_payload(payload))
