"""End-to-end runs: client phase, one message exchange, server refinement.

Three modes share the same building blocks:

``collabdm``
    clients distill locally and report per-round class means for the
    pre-committed encoders; the server refines the union of the local sets
    against the aggregated means.
``localdm``
    clients only upload their local sets; the server keeps the union.
``centralized``
    one party holding all data runs the same pipeline without a wire.

Random streams hang off ``RngStream(master_seed)``: ``("client", k)`` for
client ``k`` (``"distill"`` for local distillation, ``("means", t)`` for
round ``t`` real batches), ``"server"`` for the union subsample
(``"init"``) and refinement steps (``("round", t)``), and ``"eval"`` for
classifier seeds. The centralized mode uses client 0's streams, which is
what makes it coincide with a one-client federation.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import encoder as enc
from . import kernel
from .data import ClientShard, Dataset, PartitionSpec, dirichlet_partition
from .distill import (DMConfig, SyntheticSet, class_means, dm_grad, init_synthetic,
                      local_distill, sgd_step)
from .errors import ClientError, ConfigError, ProtocolError
from .evaluation import ClassifierSpec, evaluate
from .kernel import RngStream
from .protocol import (Channel, ClientPayload, ProtocolTrace, SeedBatch, SeedSchedule,
                       build_schedule, decode_payload, decode_seed_batch, payload_bytes,
                       seed_batch_bytes)

log = logging.getLogger(__name__)

MODES = ("collabdm", "localdm", "centralized")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run.

    ``server_ipc`` is the per-class size of the server's set (``None``
    means ``dm.ipc``); ``keep_union`` keeps every uploaded image instead.
    ``eval_every = 0`` evaluates only the final set.
    """

    mode: str = "collabdm"
    dm: DMConfig = DMConfig()
    encoder: enc.EncoderSpec = enc.EncoderSpec()
    partition: PartitionSpec = PartitionSpec()
    T: int = 200
    epsilon: float = 1.0
    master_seed: int = 0
    server_ipc: int | None = None
    keep_union: bool = False
    weighted_targets: bool = False
    eval_every: int = 50
    classifier: ClassifierSpec = ClassifierSpec()
    eval_repeats: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.T < 0 or self.eval_every < 0 or self.eval_repeats < 0 or self.workers < 1:
            raise ConfigError("T, eval_every and eval_repeats must be >= 0, workers >= 1")
        if not 0 < self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.server_ipc is not None and self.server_ipc < 1:
            raise ConfigError("server_ipc must be positive")
        _, h, w = self.encoder.input_shape
        if h % self.dm.pae_l or w % self.dm.pae_l:
            raise ConfigError(f"pae_l = {self.dm.pae_l} does not divide the {h}x{w} image size")

    @property
    def rounds(self) -> int:
        return 0 if self.mode == "localdm" else self.T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["input_shape"] = list(self.encoder.input_shape)
        return d


def client_stream(master_seed: int, k: int) -> RngStream:
    return RngStream(master_seed).substream("client", k)


def server_stream(master_seed: int) -> RngStream:
    return RngStream(master_seed).substream("server")


def client_run(client_id: int, shard: ClientShard, dataset: Dataset, seeds: SeedBatch,
               config: RunConfig, rng: RngStream | None = None,
               allow_empty: bool = False) -> ClientPayload:
    """Local distillation plus class means for every assigned round.

    An empty shard is an error unless ``allow_empty``; in that case the
    client uploads its noise initialization and no means.
    """
    if seeds.client_id != client_id:
        raise ProtocolError(f"client {client_id} received seeds for client {seeds.client_id}")
    rng = rng if rng is not None else client_stream(config.master_seed, client_id)
    dtype = kernel.default_dtype()
    if len(shard) == 0:
        if not allow_empty:
            raise ClientError(f"client {client_id} holds no training data")
        syn = init_synthetic(shard, dataset, config.dm.ipc, config.dm.pae_l,
                             rng.substream("distill").substream("init"), dtype)
    else:
        syn = local_distill(shard, dataset, config.dm, config.encoder,
                            rng.substream("distill"), dtype)
    means = {}
    for t, alpha in seeds.entries:
        params = enc.materialize(alpha, config.encoder, dtype)
        cm = class_means(params, dataset, shard, range(dataset.num_classes),
                         config.dm.batch, rng.substream("means", t))
        for y, (m, n) in cm.items():
            means[(t, y)] = (m.astype(np.float32), n)
    return ClientPayload(client_id, syn, tuple(t for t, _ in seeds.entries),
                         dataset.num_classes, config.encoder.embedding_dim, means)


def union_init(sets, config: RunConfig) -> SyntheticSet:
    """Concatenate client sets per class, then subsample to the server IPC.

    Subsampling keeps the original order and uses
    ``server_stream(seed).substream("init", y)`` for class ``y``; it is a
    no-op when the union is already small enough.
    """
    images = np.concatenate([s.images for s in sets], axis=1)
    target = config.server_ipc or config.dm.ipc
    if config.keep_union or images.shape[1] <= target:
        return SyntheticSet(images, sets[0].pae_l)
    root = server_stream(config.master_seed)
    keep = np.stack([images[y, np.sort(root.substream("init", y).sample(images.shape[1], target))]
                     for y in range(images.shape[0])])
    return SyntheticSet(keep, sets[0].pae_l)


def aggregate_targets(payloads, schedule: SeedSchedule, t: int, weighted: bool = False,
                      dtype=None) -> dict:
    """Server target per class for round ``t``.

    The unweighted mean over clients in ``Z_t`` that report the class (or
    batch-size weighted with ``weighted``); classes nobody reports are
    left out. Averaging runs in float64.
    """
    dtype = np.dtype(dtype or kernel.default_dtype())
    by_id = {p.client_id: p for p in payloads}
    acc = {}
    for k in schedule.clients(t):
        for (tt, y), (vec, n) in by_id[k].means.items():
            if tt != t:
                continue
            w = float(n) if weighted else 1.0
            s, tot = acc.get(y, (0.0, 0.0))
            acc[y] = (s + w * np.asarray(vec, dtype=np.float64), tot + w)
    return {y: (s / tot).astype(dtype) for y, (s, tot) in sorted(acc.items())}


def validate_payloads(payloads, schedule: SeedSchedule, num_classes: int, embedding_dim: int):
    ids = sorted(p.client_id for p in payloads)
    if ids != list(range(schedule.K)):
        raise ProtocolError(f"expected payloads from clients 0..{schedule.K - 1}, got {ids}")
    for p in payloads:
        expected = tuple(t for t, _ in schedule.seed_batch(p.client_id))
        if tuple(p.rounds) != expected:
            raise ProtocolError(f"client {p.client_id} reported rounds {p.rounds}, "
                                f"scheduled {expected}")
        if p.num_classes != num_classes or p.embedding_dim != embedding_dim:
            raise ProtocolError(f"client {p.client_id}: payload shape "
                                f"({p.num_classes} classes, dim {p.embedding_dim}) does not "
                                f"match ({num_classes}, {embedding_dim})")


def refine(synthetic: SyntheticSet, schedule: SeedSchedule, targets_for, config: RunConfig,
           on_round=None):
    """``T`` server steps of distribution matching at ``dm.server_lr``.

    ``targets_for(t, params)`` supplies the class targets of round ``t``.
    Returns the final set and the per-round loss trace.
    """
    dtype = kernel.default_dtype()
    root = server_stream(config.master_seed)
    losses = []
    syn = synthetic
    for t in range(1, schedule.T + 1):
        params = enc.materialize(schedule.alpha(t), config.encoder, dtype)
        targets = targets_for(t, params)
        loss, _, grads = dm_grad(syn, targets, params, root.substream("round", t),
                                 config.dm.syn_batch_cap)
        syn = sgd_step(syn, grads, config.dm.server_lr, config.dm.momentum)
        losses.append(loss)
        if on_round is not None:
            on_round(t, syn)
    return syn, losses


def server_refine(payloads, schedule: SeedSchedule, config: RunConfig, on_round=None,
                  trace: ProtocolTrace | None = None):
    """Initialize from the uploaded sets and refine against aggregated means.

    No messages may be exchanged here: the trace, if given, is locked.
    """
    payloads = sorted(payloads, key=lambda p: p.client_id)
    num_classes = payloads[0].synthetic.num_classes
    validate_payloads(payloads, schedule, num_classes, config.encoder.embedding_dim)
    if trace is not None:
        trace.phase = "refine"
    syn = union_init([p.synthetic for p in payloads], config)
    cache = {}

    def targets_for(t, _params):
        if t not in cache:
            cache.clear()
            cache[t] = aggregate_targets(payloads, schedule, t, config.weighted_targets)
        return cache[t]

    return refine(syn, schedule, targets_for, config, on_round)


@dataclass
class RunReport:
    mode: str
    config: RunConfig
    synthetic: SyntheticSet
    losses: list
    accuracy: list = field(default_factory=list)  # (t, uplink bytes per client, mean, std)
    uplink_bytes: list = field(default_factory=list)
    downlink_bytes: list = field(default_factory=list)
    client_sizes: list = field(default_factory=list)
    trace: ProtocolTrace | None = None
    payloads: list = field(default_factory=list, repr=False)

    def final_accuracy(self):
        return self.accuracy[-1][2] if self.accuracy else None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "backend": kernel.BACKEND,
            "config": self.config.to_dict(),
            "client_sizes": self.client_sizes,
            "uplink_bytes": self.uplink_bytes,
            "downlink_bytes": self.downlink_bytes,
            "losses": [round(float(v), 9) for v in self.losses],
            "accuracy": [{"iteration": t, "bytes_per_client": b,
                          "mean": round(m, 6), "std": round(s, 6)}
                         for t, b, m, s in self.accuracy],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _bytes_until(payloads, t, num_classes, dim):
    """Mean uplink size per client if payloads stopped after round ``t``."""
    sizes = []
    for p in payloads:
        rounds = [r for r in p.rounds if r <= t]
        present = sum(1 for (r, _) in p.means if r <= t)
        sizes.append(payload_bytes(len(rounds), num_classes, dim,
                                   len(p.synthetic.to_bytes()), present))
    return float(np.mean(sizes)) if sizes else 0.0


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def run(config: RunConfig, train: Dataset, test: Dataset | None = None,
        message_dir=None) -> RunReport:
    """Execute ``config.mode`` and evaluate along the way when ``test`` is given."""
    if tuple(train.image_shape) != config.encoder.input_shape:
        raise ConfigError(f"dataset images {train.image_shape} do not match encoder input "
                          f"{config.encoder.input_shape}")
    if config.mode == "centralized":
        return _run_centralized(config, train, test)
    return _run_federated(config, train, test, message_dir)


def _evaluator(config, test, report, bytes_at):
    def evaluate_at(t, syn):
        if test is None or config.eval_repeats == 0:
            return
        seed = int(RngStream(config.master_seed).substream("eval", t).next_u64() >> 33)
        accs = evaluate(syn, test, replace(config.classifier, seed=seed), config.eval_repeats)
        report.accuracy.append((t, bytes_at(t), float(np.mean(accs)), float(np.std(accs))))
        log.info("iteration %d: accuracy %.4f", t, np.mean(accs))

    def on_round(t, syn):
        if config.eval_every and t % config.eval_every == 0 and t != config.rounds:
            evaluate_at(t, syn)

    return evaluate_at, on_round


def _run_federated(config, train, test, message_dir):
    K = config.partition.K
    shards = dirichlet_partition(train, config.partition)
    schedule = build_schedule(config.master_seed, config.rounds, K, config.epsilon)
    channel = Channel(ProtocolTrace(), message_dir)
    report = RunReport(config.mode, config, None, [], trace=channel.trace,
                       client_sizes=[len(s) for s in shards])

    inbox = [decode_seed_batch(channel.send_seeds(SeedBatch(k, tuple(schedule.seed_batch(k)))))
             for k in range(K)]
    report.downlink_bytes = [seed_batch_bytes(len(b.entries)) for b in inbox]

    def client(k):
        payload = client_run(k, shards[k], train, inbox[k], config, allow_empty=True)
        return decode_payload(channel.send_payload(payload), kernel.default_dtype())

    payloads = _map(client, range(K), config.workers)
    report.payloads = payloads
    report.uplink_bytes = [e.nbytes for e in sorted(channel.trace.events,
                                                     key=lambda e: e.client_id)
                           if e.direction == "up"]
    dim = config.encoder.embedding_dim

    def bytes_at(t):
        return _bytes_until(payloads, t, train.num_classes, dim)

    evaluate_at, on_round = _evaluator(config, test, report, bytes_at)
    syn, losses = server_refine(payloads, schedule, config, on_round, channel.trace)
    report.synthetic, report.losses = syn, losses
    evaluate_at(config.rounds, syn)
    return report


def _run_centralized(config, train, test):
    dtype = kernel.default_dtype()
    # the one-client partition: every example, in the same per-class order a
    # federation with K = 1 would hold them
    (shard,) = dirichlet_partition(train, replace(config.partition, K=1))
    rng = client_stream(config.master_seed, 0)
    schedule = build_schedule(config.master_seed, config.T, 1, 1.0)
    report = RunReport("centralized", config, None, [], client_sizes=[len(shard)])
    syn = local_distill(shard, train, config.dm, config.encoder, rng.substream("distill"), dtype)
    syn = union_init([syn], config)

    def targets_for(t, params):
        cm = class_means(params, train, shard, range(train.num_classes), config.dm.batch,
                         rng.substream("means", t))
        # the wire carries float32 means, so round the same way
        return {y: np.asarray(m, np.float32).astype(dtype) for y, (m, _) in cm.items()}

    evaluate_at, on_round = _evaluator(config, test, report, lambda t: 0.0)
    syn, losses = refine(syn, schedule, targets_for, config, on_round)
    report.synthetic, report.losses = syn, losses
    evaluate_at(config.T, syn)
    return report
