"""Asynchronous dual-trainer protocol.

The policy trainer owns the temporal and policy models and publishes them
every iteration; the clustering trainer owns the autoencoder, refetches the
temporal model on a fixed period, and publishes clustering snapshots that
the policy side's predictor picks up each iteration. All cross-trainer
traffic flows through an in-process versioned snapshot store, which is the
seam a networked deployment would replace.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .clustering import (
    BlockPartition,
    autoencoder_forward,
    build_block_partition,
    cluster_backward,
    cluster_forward,
    init_autoencoder,
)
from .numerics import (
    Array,
    OptimizerState,
    ParamSet,
    named_rng,
    param_checksum,
    mbgd_step,
)
from .policy import (
    EmptyTrainingSignal,
    accumulate_by_cluster,
    init_policy_head,
    make_policy_target,
    policy_backward_many,
    policy_forward_many,
    policy_loss,
)
from .temporal import TemporalConfig, init_temporal_params, peak_indices, temporal_forward_many


class DivergenceError(RuntimeError):
    """Training loss went non-finite or above the guard threshold."""


class SnapshotError(RuntimeError):
    """Snapshot store misuse or checksum mismatch."""


class DeadlockError(RuntimeError):
    """The async or replay scheduler could not make progress."""


@dataclass(frozen=True)
class Snapshot:
    family: str
    version: int
    params: ParamSet
    checksum: int
    tag: float


class ModelStore:
    """Versioned, checksummed snapshots per model family; reads are isolated."""

    def __init__(self, retain_history: bool = False):
        self._lock = threading.Lock()
        self._latest: dict[str, Snapshot] = {}
        self._history: dict[str, list[Snapshot]] = {}
        self._retain = retain_history

    def publish(self, family: str, params: ParamSet) -> Snapshot:
        frozen = params.frozen()
        snap_params = ParamSet(frozen.params, params.version)
        checksum = param_checksum(snap_params)
        with self._lock:
            version = self._latest[family].version + 1 if family in self._latest else 1
            snap = Snapshot(family, version, snap_params, checksum, time.time())
            self._latest[family] = snap
            if self._retain:
                self._history.setdefault(family, []).append(snap)
        return snap

    def latest(self, family: str) -> Snapshot | None:
        with self._lock:
            snap = self._latest.get(family)
        if snap is not None and param_checksum(snap.params) != snap.checksum:
            raise SnapshotError(f"checksum mismatch reading latest '{family}' snapshot")
        return snap

    def latest_version(self, family: str) -> int:
        with self._lock:
            snap = self._latest.get(family)
        return snap.version if snap else 0

    def get(self, family: str, version: int) -> Snapshot:
        with self._lock:
            for snap in self._history.get(family, []):
                if snap.version == version:
                    break
            else:
                raise SnapshotError(f"no retained snapshot {family}@{version}")
        if param_checksum(snap.params) != snap.checksum:
            raise SnapshotError(f"checksum mismatch reading {family}@{version}")
        return snap


@dataclass(frozen=True)
class Sample:
    video_id: str
    tensor: Array  # [U, D+1, T]; the final day is the training target
    upload_day: int


@dataclass
class ReplayDataset:
    samples: list[Sample]
    order: list[int]

    @classmethod
    def build(cls, samples) -> "ReplayDataset":
        samples = list(samples)
        return cls(samples=samples, order=list(range(len(samples))))


def shuffle_dataset(ds: ReplayDataset, seed: int) -> ReplayDataset:
    """Seeded Fisher-Yates permutation of the iteration order."""
    if not ds.samples:
        raise ValueError("cannot shuffle an empty dataset")
    rng = named_rng(seed, "shuffle")
    order = list(ds.order)
    for i in range(len(order) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return ReplayDataset(samples=ds.samples, order=order)


class _Cursor:
    """Wrapping sequential batches over a fixed iteration order."""

    def __init__(self, dataset: ReplayDataset, batch_size: int):
        self.dataset = dataset
        self.batch_size = batch_size
        self.pos = 0

    def next_batch(self) -> list[Sample]:
        order = self.dataset.order
        batch = []
        for _ in range(min(self.batch_size, len(order))):
            batch.append(self.dataset.samples[order[self.pos]])
            self.pos = (self.pos + 1) % len(order)
        return batch


class _HalvesCursor:
    """Date-ordered dataset split in the middle; halves alternate on a period."""

    def __init__(self, dataset: ReplayDataset, batch_size: int, period: int):
        ordered = sorted(
            range(len(dataset.samples)),
            key=lambda i: (dataset.samples[i].upload_day, dataset.samples[i].video_id),
        )
        mid = len(ordered) // 2
        self.cursors = [
            _Cursor(ReplayDataset(dataset.samples, ordered[:mid]), batch_size),
            _Cursor(ReplayDataset(dataset.samples, ordered[mid:]), batch_size),
        ]
        self.period = period
        self.iteration = 0

    def next_batch(self) -> list[Sample]:
        half = (self.iteration // self.period) % 2
        self.iteration += 1
        return self.cursors[half].next_batch()


@dataclass
class TrainConfig:
    batch_size: int = 32
    policy_iters: int = 5000
    cluster_iters: int = 10000
    fetch_period: int = 200
    warmup: int = 200
    lr_temporal: float = 0.02
    lr_policy: float = 0.05
    lr_cluster: float = 0.05
    decay: float = 0.9999
    omega: float = 0.1
    cluster_budget: int = 16
    ndh: int = 2
    shuffle: bool = True
    halves: bool = False
    half_period: int = 200
    ae_hidden: tuple = (64, 16)
    enc_gain: float = 6.0
    head_hidden: tuple = ()
    seed: int = 0
    divergence_limit: float = 1e6
    async_timeout: float = 900.0

    def __post_init__(self):
        if self.fetch_period < 1:
            raise ValueError("fetch period must be at least 1")
        for name in ("lr_temporal", "lr_policy", "lr_cluster"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Schedule:
    """Cross-trainer versions observed during a run, for deterministic replay."""

    policy_cluster_versions: list[int] = field(default_factory=list)
    cluster_fetch_versions: list[int] = field(default_factory=list)


@dataclass
class TrainResult:
    temporal: ParamSet
    clustering: ParamSet
    policy: ParamSet
    partition: BlockPartition
    policy_trace: list[dict]
    cluster_trace: list[dict]
    schedule: Schedule
    store: ModelStore


def _normalize_rows(tensors: Array) -> Array:
    """L2-normalize each leading-axis tensor (whole-tensor norm)."""
    tensors = np.asarray(tensors, dtype=np.float64)
    flat = tensors.reshape(tensors.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
    out = np.where(norms > 1e-12, flat / np.maximum(norms, 1e-300), 0.0)
    return out.reshape(tensors.shape)


def corpus_peak_index(samples, days: int, k: int, normalize: bool = True) -> Array:
    """Top-K interval indices from totals over the whole sample corpus.

    Totals are taken over per-video normalized tensors by default, matching
    what the clustering path feeds into the temporal layers.
    """
    stack = np.stack([np.asarray(s.tensor, dtype=np.float64)[:, :days, :] for s in samples])
    if normalize:
        stack = _normalize_rows(stack)
    return peak_indices(stack.sum(axis=0), k)


def predict_clusters(
    tensors: Array,
    tcfg: TemporalConfig,
    temporal_params: ParamSet,
    ae_params: ParamSet,
    partition: BlockPartition,
    peak_idx: Array,
):
    """Clustering predictor: normalization + temporal layers + encoder only.

    Per-video tensors are L2-normalized before the shared temporal layers so
    both networks feed them the same unit scale; raw counts would saturate
    gates tuned on normalized accumulated tensors. With frozen models and
    frozen peak totals this is a pure per-video map, so assignments never
    depend on which other videos share the call.
    """
    t_v, _ = temporal_forward_many(_normalize_rows(tensors), tcfg, temporal_params, peak_idx)
    nt = _normalize_rows(t_v.reshape(t_v.shape[0], -1))
    e, _d_out, _cache = autoencoder_forward(nt, ae_params)
    return partition.assign_points(e), e


class AssignmentProvider:
    """Feeds the policy trainer fresh cluster indices each iteration.

    Uses seeded random indices until the clustering trainer has published a
    model, then switches to the clustering predictor with corpus-frozen
    peak totals.
    """

    def __init__(self, store: ModelStore, tcfg: TemporalConfig, partition: BlockPartition, peak_idx: Array, seed: int):
        self.store = store
        self.tcfg = tcfg
        self.partition = partition
        self.peak_idx = peak_idx
        self.seed = seed
        self._random_cache: dict[str, int] = {}

    def _random_index(self, video_id: str) -> int:
        if video_id not in self._random_cache:
            rng = named_rng(self.seed, f"assign.{video_id}")
            self._random_cache[video_id] = int(rng.integers(self.partition.cluster_count))
        return self._random_cache[video_id]

    def assign(self, temporal_params: ParamSet, samples) -> tuple[dict[str, int], int]:
        snap = self.store.latest("clustering")
        if snap is None:
            return {s.video_id: self._random_index(s.video_id) for s in samples}, 0
        xs = np.stack([np.asarray(s.tensor, dtype=np.float64)[:, : self.tcfg.days, :] for s in samples])
        clusters, _e = predict_clusters(
            xs, self.tcfg, temporal_params, snap.params, self.partition, self.peak_idx
        )
        return {s.video_id: int(c) for s, c in zip(samples, clusters)}, snap.version


class PolicyTrainer:
    """Owns the temporal and policy models; one MBGD step per iteration."""

    def __init__(
        self,
        params: ParamSet,
        store: ModelStore,
        dataset: ReplayDataset,
        tcfg: TemporalConfig,
        cfg: TrainConfig,
        peak_window,
        provider: AssignmentProvider,
    ):
        self.params = params
        self.store = store
        self.tcfg = tcfg
        self.cfg = cfg
        self.peak_window = list(peak_window)
        self.provider = provider
        self.opt = OptimizerState(
            {"temporal.": cfg.lr_temporal, "policy.": cfg.lr_policy}, cfg.decay
        )
        if cfg.halves:
            self.cursor = _HalvesCursor(dataset, cfg.batch_size, cfg.half_period)
        else:
            self.cursor = _Cursor(dataset, cfg.batch_size)
        self.trace: list[dict] = []
        self.schedule_versions: list[int] = []
        self.iterations = 0
        self.publish()

    def publish(self) -> None:
        self.store.publish("temporal", self.params.subset("temporal."))
        self.store.publish("policy", self.params.subset("policy."))

    def step(self) -> None:
        batch = self.cursor.next_batch()
        assignments, cl_version = self.provider.assign(self.params, batch)
        xa = accumulate_by_cluster([(s.video_id, s.tensor) for s in batch], assignments)
        d = self.tcfg.days
        scored = []
        targets = {}
        for c in sorted(xa):
            target = make_policy_target(xa[c][:, d, :], self.peak_window)
            if target is not None:
                scored.append(c)
                targets[c] = target
        if not scored:
            raise EmptyTrainingSignal("empty training signal: batch has no scored clusters")
        xs = np.stack([xa[c][:, :d, :] for c in scored])
        up, cache = policy_forward_many(xs, self.tcfg, self.params, self.params)
        up_map = {c: up[i] for i, c in enumerate(scored)}
        loss, grad_map = policy_loss(up_map, targets)
        if not np.isfinite(loss) or loss > self.cfg.divergence_limit:
            raise DivergenceError(
                f"policy loss {loss} at iteration {self.iterations} "
                f"(temporal v{self.store.latest_version('temporal')})"
            )
        d_up = np.stack([grad_map[c] for c in scored])
        grads, _ = policy_backward_many(cache, d_up)
        self.params = mbgd_step(self.params, grads, self.opt)
        self.iterations += 1
        self.publish()
        self.schedule_versions.append(cl_version)
        self.trace.append(
            dict(
                iteration=self.iterations,
                loss=loss,
                temporal_version=self.store.latest_version("temporal"),
                policy_version=self.store.latest_version("policy"),
                clustering_version=cl_version,
            )
        )


class ClusterTrainer:
    """Owns the autoencoder; trains against a periodically refetched temporal model."""

    def __init__(
        self,
        params: ParamSet,
        store: ModelStore,
        dataset: ReplayDataset,
        tcfg: TemporalConfig,
        cfg: TrainConfig,
        partition: BlockPartition,
    ):
        self.params = params
        self.store = store
        self.tcfg = tcfg
        self.cfg = cfg
        self.partition = partition
        self.opt = OptimizerState({"cluster.": cfg.lr_cluster}, cfg.decay)
        self.cursor = _Cursor(dataset, cfg.batch_size)
        self.trace: list[dict] = []
        self.fetch_versions: list[int] = []
        self.iterations = 0
        self.temporal_snap: Snapshot | None = None

    def step(self) -> None:
        if self.iterations % self.cfg.fetch_period == 0:
            snap = self.store.latest("temporal")
            if snap is None:
                raise SnapshotError("clustering trainer started before any temporal snapshot")
            self.temporal_snap = snap
            self.fetch_versions.append(snap.version)
        batch = self.cursor.next_batch()
        d = self.tcfg.days
        xs = _normalize_rows(
            np.stack([np.asarray(s.tensor, dtype=np.float64)[:, :d, :] for s in batch])
        )
        idx = peak_indices(xs.sum(axis=0), self.tcfg.k)
        t_v, _ = temporal_forward_many(xs, self.tcfg, self.temporal_snap.params, idx)
        result, cache = cluster_forward(t_v, self.params, self.partition, self.cfg.omega)
        loss = result["loss"] / len(batch)
        if not np.isfinite(loss) or loss > self.cfg.divergence_limit:
            raise DivergenceError(
                f"clustering loss {loss} at iteration {self.iterations} "
                f"(temporal v{self.temporal_snap.version})"
            )
        grads, _ = cluster_backward(cache, scale=1.0 / len(batch))
        self.params = mbgd_step(self.params, grads, self.opt)
        self.iterations += 1
        self.store.publish("clustering", self.params)
        self.trace.append(
            dict(
                iteration=self.iterations,
                loss=loss,
                temporal_version=self.temporal_snap.version,
                clustering_version=self.store.latest_version("clustering"),
            )
        )


def _setup(samples, tcfg: TemporalConfig, cfg: TrainConfig, peak_window, store=None,
           initial: dict[str, ParamSet] | None = None):
    store = store or ModelStore()
    partition = build_block_partition(cfg.ndh, cfg.cluster_budget)
    users = samples[0].tensor.shape[0]
    temporal_params = init_temporal_params(tcfg, cfg.seed)
    policy_params = init_policy_head(users, tcfg.hidden, cfg.seed, cfg.head_hidden)
    ae_params = init_autoencoder(users * tcfg.hidden, cfg.ae_hidden, cfg.seed, cfg.enc_gain)
    if initial:
        if "temporal" in initial:
            temporal_params = initial["temporal"]
        if "policy" in initial:
            policy_params = initial["policy"]
        if "clustering" in initial:
            ae_params = ParamSet(
                {k: v for k, v in initial["clustering"].params.items() if not k.startswith("cluster.partition.")},
                initial["clustering"].version,
            )
    combined = temporal_params.merged_with(policy_params)

    base = ReplayDataset.build(samples)
    if cfg.shuffle and not cfg.halves:
        policy_ds = shuffle_dataset(base, cfg.seed * 7919 + 1)
        cluster_ds = shuffle_dataset(base, cfg.seed * 7919 + 2)
    else:
        policy_ds = base
        cluster_ds = shuffle_dataset(base, cfg.seed * 7919 + 2)

    peak_idx = corpus_peak_index(samples, tcfg.days, tcfg.k)
    provider = AssignmentProvider(store, tcfg, partition, peak_idx, cfg.seed)
    pt = PolicyTrainer(combined, store, policy_ds, tcfg, cfg, peak_window, provider)
    ct = ClusterTrainer(ae_params, store, cluster_ds, tcfg, cfg, partition)
    return store, partition, pt, ct


def _result(pt: PolicyTrainer, ct: ClusterTrainer, partition, store) -> TrainResult:
    clustering = ct.params.copy()
    clustering.params.update(partition.to_params())
    return TrainResult(
        temporal=pt.params.subset("temporal."),
        clustering=clustering,
        policy=pt.params.subset("policy."),
        partition=partition,
        policy_trace=pt.trace,
        cluster_trace=ct.trace,
        schedule=Schedule(pt.schedule_versions, ct.fetch_versions),
        store=store,
    )


def run_interleaved(samples, tcfg: TemporalConfig, cfg: TrainConfig, peak_window,
                    store=None, initial=None) -> TrainResult:
    """Single-threaded deterministic schedule: policy warmup, then proportional
    interleaving until both loops reach their configured iteration counts."""
    store, partition, pt, ct = _setup(samples, tcfg, cfg, peak_window, store, initial)
    warmup = min(cfg.warmup, cfg.policy_iters)
    for _ in range(warmup):
        pt.step()
    remaining = cfg.policy_iters - warmup
    ratio = cfg.cluster_iters / remaining if remaining > 0 else 0.0
    acc = 0.0
    for _ in range(remaining):
        pt.step()
        acc += ratio
        while acc >= 1.0 and ct.iterations < cfg.cluster_iters:
            ct.step()
            acc -= 1.0
    while ct.iterations < cfg.cluster_iters:
        ct.step()
    return _result(pt, ct, partition, store)


def run_async(samples, tcfg: TemporalConfig, cfg: TrainConfig, peak_window,
              store=None, initial=None) -> TrainResult:
    """Concurrent mode: both trainers run in threads, exchanging snapshots
    through the store; the clustering side starts after the policy warmup."""
    store, partition, pt, ct = _setup(samples, tcfg, cfg, peak_window, store, initial)
    warmup_done = threading.Event()
    errors: list[BaseException] = []

    def policy_loop():
        try:
            for i in range(cfg.policy_iters):
                pt.step()
                if pt.iterations >= min(cfg.warmup, cfg.policy_iters):
                    warmup_done.set()
            warmup_done.set()
        except BaseException as exc:  # propagate to the caller
            errors.append(exc)
            warmup_done.set()

    def cluster_loop():
        try:
            warmup_done.wait(timeout=cfg.async_timeout)
            for _ in range(cfg.cluster_iters):
                if errors:
                    return
                ct.step()
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=policy_loop), threading.Thread(target=cluster_loop)]
    for t in threads:
        t.start()
    deadline = time.time() + cfg.async_timeout
    for t in threads:
        t.join(timeout=max(0.0, deadline - time.time()))
    if any(t.is_alive() for t in threads):
        raise DeadlockError(
            f"async training stalled: policy at {pt.iterations}/{cfg.policy_iters}, "
            f"clustering at {ct.iterations}/{cfg.cluster_iters}"
        )
    if errors:
        raise errors[0]
    return _result(pt, ct, partition, store)


def run_with_schedule(samples, tcfg: TemporalConfig, cfg: TrainConfig, peak_window,
                      schedule: Schedule, store=None, initial=None) -> TrainResult:
    """Replay a recorded cross-trainer version schedule deterministically."""
    store, partition, pt, ct = _setup(samples, tcfg, cfg, peak_window, store, initial)
    guard = 0
    limit = 4 * (cfg.policy_iters + cfg.cluster_iters) + 16
    while pt.iterations < cfg.policy_iters or ct.iterations < cfg.cluster_iters:
        guard += 1
        if guard > limit:
            raise DeadlockError("replay scheduler made no progress")
        if pt.iterations < cfg.policy_iters:
            need = schedule.policy_cluster_versions[pt.iterations]
            have = store.latest_version("clustering")
            if have == need:
                pt.step()
                continue
            if have > need:
                raise DeadlockError(
                    f"replay overran clustering version: have {have}, need {need}"
                )
        if ct.iterations < cfg.cluster_iters:
            if ct.iterations % cfg.fetch_period == 0:
                need_t = schedule.cluster_fetch_versions[ct.iterations // cfg.fetch_period]
                have_t = store.latest_version("temporal")
                if have_t < need_t:
                    raise DeadlockError(
                        f"replay blocked: temporal v{have_t} published, fetch needs v{need_t}"
                    )
                if have_t > need_t:
                    raise DeadlockError(
                        f"replay overran temporal version: have {have_t}, need {need_t}"
                    )
            ct.step()
            continue
        raise DeadlockError("replay scheduler stuck")
    return _result(pt, ct, partition, store)


def policy_train_loop(store: ModelStore, samples, tcfg: TemporalConfig, cfg: TrainConfig,
                      peak_window, provider: AssignmentProvider | None = None):
    """Policy side alone (randomized indices unless a provider is given)."""
    partition = build_block_partition(cfg.ndh, cfg.cluster_budget)
    users = samples[0].tensor.shape[0]
    combined = init_temporal_params(tcfg, cfg.seed).merged_with(
        init_policy_head(users, tcfg.hidden, cfg.seed, cfg.head_hidden)
    )
    base = ReplayDataset.build(samples)
    if cfg.shuffle and not cfg.halves:
        ds = shuffle_dataset(base, cfg.seed * 7919 + 1)
    else:
        ds = base
    if provider is None:
        peak_idx = corpus_peak_index(samples, tcfg.days, tcfg.k)
        provider = AssignmentProvider(store, tcfg, partition, peak_idx, cfg.seed)
    pt = PolicyTrainer(combined, store, ds, tcfg, cfg, peak_window, provider)
    for _ in range(cfg.policy_iters):
        pt.step()
    return pt


def cluster_train_loop(store: ModelStore, samples, tcfg: TemporalConfig, cfg: TrainConfig,
                       partition: BlockPartition | None = None):
    """Clustering side alone; requires a published temporal snapshot."""
    partition = partition or build_block_partition(cfg.ndh, cfg.cluster_budget)
    users = samples[0].tensor.shape[0]
    ae_params = init_autoencoder(users * tcfg.hidden, cfg.ae_hidden, cfg.seed, cfg.enc_gain)
    ds = shuffle_dataset(ReplayDataset.build(samples), cfg.seed * 7919 + 2)
    ct = ClusterTrainer(ae_params, store, ds, tcfg, cfg, partition)
    for _ in range(cfg.cluster_iters):
        ct.step()
    return ct


def write_trace_csv(path, rows: list[dict]) -> None:
    if not rows:
        with open(path, "w") as fh:
            fh.write("iteration,loss\n")
        return
    keys = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in keys) + "\n")
