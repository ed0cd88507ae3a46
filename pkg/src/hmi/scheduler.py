"""Request batching and the three-stage inference pipeline.

Each batch goes through representation retrieval (cpu worker), per-layer
adapter prefetch (io worker) and per-layer transformer compute (compute
worker).  Timing runs on a deterministic virtual clock; the numeric backend
additionally computes real outputs, which never depend on the pipeline mode.

Pipelining is described by two switches:

* ``overlap_retrieval`` -- retrieval of batch b may start as soon as batch
  b-1 begins computing, instead of after it finishes.
* ``prefetch`` -- ``"none"``: adapters of batch b load only after batch b-1
  finished computing, and compute waits for all layers; ``"batch"``: batch
  b's loads may overlap batch b-1's compute, compute still waits for all of
  them; ``"layer"``: additionally compute of layer j waits only for layer j.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import plot
from .adapters import AdapterStore, DeviceSlotPool, LoadReport, TransferModel, batched_adapter_apply, stack
from .errors import ConfigurationError, RoutingError, SchedulingError
from .transformer import Model, OutputHead, apply_head, layer_forward_batch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

WORKERS = ("cpu", "io", "compute")


@dataclass(frozen=True)
class PipelineMode:
    name: str
    overlap_retrieval: bool
    prefetch: str  # none | batch | layer


MODES = {
    "sync": PipelineMode("sync", False, "none"),
    "coarse": PipelineMode("coarse", True, "batch"),
    "fine": PipelineMode("fine", True, "layer"),
    # ablations: fine pipelining with one overlap removed
    "no_retrieval_overlap": PipelineMode("no_retrieval_overlap", False, "layer"),
    "no_adapter_overlap": PipelineMode("no_adapter_overlap", True, "none"),
}


def get_mode(mode) -> PipelineMode:
    if isinstance(mode, PipelineMode):
        return mode
    try:
        return MODES[mode]
    except KeyError:
        raise ConfigurationError(f"unknown pipeline mode {mode!r}; choose from {sorted(MODES)}") from None


@dataclass
class InferRequest:
    request_id: int
    tenant_id: str
    instance_id: str
    version_id: int
    task_id: str
    tokens: Sequence[int]
    enqueue_time: float = 0.0
    head: Optional[OutputHead] = None

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("request has no tokens")


@dataclass
class InferBatch:
    batch_id: int
    requests: list[InferRequest] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.requests)

    @property
    def task_ids(self) -> list[str]:
        return list(dict.fromkeys(r.task_id for r in self.requests))

    @property
    def token_count(self) -> int:
        return sum(len(r.tokens) for r in self.requests)


class RequestQueue:
    """Input queue of batches; new requests join the last batch until it is full."""

    def __init__(self, max_batch_size: int, router=None):
        if max_batch_size < 1:
            raise ConfigurationError("max_batch_size must be at least 1")
        self.max_batch_size = max_batch_size
        self.router = router
        self.batches: list[InferBatch] = []
        self._open = False
        self._ids = itertools.count()

    def enqueue(self, request: InferRequest) -> tuple[int, int]:
        """Place ``request``; returns ``(batch_id, position_in_batch)``."""
        if self.router is not None and not self.router(request):
            raise RoutingError(f"unknown instance {request.instance_id!r}")
        if not self._open or len(self.batches[-1]) >= self.max_batch_size:
            self.batches.append(InferBatch(next(self._ids)))
            self._open = True
        self.batches[-1].requests.append(request)
        return self.batches[-1].batch_id, len(self.batches[-1]) - 1

    def pop_batch(self, close: bool = True) -> Optional[InferBatch]:
        """Remove the head batch; a partially filled last batch is taken only if ``close``."""
        if not self.batches:
            return None
        if len(self.batches) == 1 and len(self.batches[0]) < self.max_batch_size and not close:
            return None
        if len(self.batches) == 1:
            self._open = False
        return self.batches.pop(0)

    def drain(self) -> list[InferBatch]:
        out, self.batches, self._open = self.batches, [], False
        return out

    def __len__(self) -> int:
        return sum(len(b) for b in self.batches)


# -- backends --------------------------------------------------------------

@dataclass(frozen=True)
class Latencies:
    retrieval_per_token_ms: float = 0.002
    compute_per_layer_ms: float = 1.0  # one layer for a whole batch

    def __post_init__(self):
        if self.retrieval_per_token_ms < 0 or self.compute_per_layer_ms < 0:
            raise ConfigurationError("latencies must be non-negative")


class SimulatedBackend:
    """Charges configured latencies and passes placeholder states through."""

    kind = "simulated"

    def __init__(self, higher_layers: int, latencies: Latencies = Latencies()):
        self.higher_layers = higher_layers
        self.latencies = latencies

    def retrieve(self, batch: InferBatch) -> list:
        return [None] * len(batch)

    def compute(self, batch, layer_index, states, store):
        return states

    def finish(self, batch, states) -> list:
        return [None] * len(batch)


class NumericBackend:
    """Real outputs from PLOT retrieval and the shared higher stack.

    Timing still comes from ``latencies`` so that traces share one virtual
    clock with the simulated backend.
    """

    kind = "numeric"

    def __init__(self, model: Model, tree: plot.VersionTree, latencies: Latencies = Latencies()):
        self.model = model
        self.tree = tree
        self.latencies = latencies

    @property
    def higher_layers(self) -> int:
        return self.model.config.higher_layers

    def retrieve(self, batch: InferBatch) -> list[np.ndarray]:
        mode = self.model.config.mode
        return [plot.retrieve_sequence(self.tree, r.version_id, r.tokens, mode) for r in batch.requests]

    def compute(self, batch: InferBatch, layer_index: int, states: list[np.ndarray],
                store: AdapterStore) -> list[np.ndarray]:
        cfg = self.model.config
        lengths = [s.shape[0] for s in states]
        n = max(lengths)
        padded = np.zeros((len(states), n, cfg.hidden_size))
        for i, s in enumerate(states):
            padded[i, : s.shape[0]] = s
        stacked = stack([store.get(r.task_id) for r in batch.requests], layer_index)
        out = layer_forward_batch(padded, self.model.higher[layer_index], cfg.heads, cfg.causal,
                                  lambda a: batched_adapter_apply(a, stacked), lengths)
        return [out[i, :length] for i, length in enumerate(lengths)]

    def finish(self, batch: InferBatch, states: list[np.ndarray]) -> list[np.ndarray]:
        return [apply_head(s, r.head) for r, s in zip(batch.requests, states)]


# -- stages ----------------------------------------------------------------

def stage_retrieve(batch: InferBatch, backend) -> tuple[list, float]:
    """Per-request representations plus the cpu time charged for the batch."""
    return backend.retrieve(batch), backend.latencies.retrieval_per_token_ms * batch.token_count


def stage_prefetch(batch: InferBatch, layer_index: int, pool: DeviceSlotPool,
                   store: AdapterStore) -> LoadReport:
    if not 0 <= layer_index < len(store.get(batch.requests[0].task_id).layers):
        raise ConfigurationError(f"layer {layer_index} out of range")
    items = [((t, layer_index), store.get(t).layer_bytes(layer_index)) for t in batch.task_ids]
    return pool.access(items)


def stage_compute(batch: InferBatch, layer_index: int, states: list, backend,
                  pool: DeviceSlotPool, store: AdapterStore) -> tuple[list, float]:
    for t in batch.task_ids:
        if not pool.is_resident((t, layer_index)):
            raise SchedulingError(f"adapter {t!r} layer {layer_index} not resident at compute time")
    return backend.compute(batch, layer_index, states, store), backend.latencies.compute_per_layer_ms


# -- trace -----------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    batch_id: int
    stage: str  # retrieve | prefetch | compute
    layer: Optional[int]
    start: float
    end: float
    worker: str


@dataclass
class StageTrace:
    intervals: list[Interval] = field(default_factory=list)

    def add(self, *args) -> Interval:
        iv = Interval(*args)
        if iv.end < iv.start:
            raise SchedulingError(f"interval ends before it starts: {iv}")
        self.intervals.append(iv)
        return iv

    def by_worker(self, worker: str) -> list[Interval]:
        return sorted((iv for iv in self.intervals if iv.worker == worker), key=lambda iv: (iv.start, iv.end))

    def find(self, batch_id: int, stage: str, layer: Optional[int] = None) -> Interval:
        for iv in self.intervals:
            if iv.batch_id == batch_id and iv.stage == stage and iv.layer == layer:
                return iv
        raise KeyError((batch_id, stage, layer))

    @property
    def makespan(self) -> float:
        if not self.intervals:
            return 0.0
        return max(iv.end for iv in self.intervals) - min(iv.start for iv in self.intervals)

    def busy(self, worker: str) -> float:
        return sum(iv.end - iv.start for iv in self.intervals if iv.worker == worker)

    def overlaps(self) -> list[tuple[Interval, Interval]]:
        """Pairs of same-worker intervals that overlap (should always be empty)."""
        bad = []
        for w in WORKERS:
            ivs = self.by_worker(w)
            for a, b in zip(ivs, ivs[1:]):
                if b.start < a.end and a.start < b.end:
                    bad.append((a, b))
        return bad


@dataclass
class RequestResult:
    request_id: int
    batch_id: int
    output: Optional[np.ndarray]
    enqueue_time: float
    completion_time: float


@dataclass
class _BatchTimes:
    compute_start: list[float]
    compute_end: list[float]


class PipelineSimulator:
    """Incremental list scheduler for batches on the three logical workers.

    Batches are submitted in order.  Each worker executes its operations in
    submission order; an operation starts when its worker is free and its
    dependencies (set by the pipeline mode) have been met.  Pool state is
    mutated in io order, so load durations are identical across modes.
    """

    def __init__(self, mode, backend, pool: DeviceSlotPool, store: AdapterStore):
        self.mode = get_mode(mode)
        self.backend = backend
        self.pool = pool
        self.store = store
        self.trace = StageTrace()
        self.free = dict.fromkeys(WORKERS, 0.0)
        self.load_reports: list[LoadReport] = []
        self.peak_resident_bytes = 0
        self._prev: Optional[_BatchTimes] = None
        self._io_seq = 0
        # (task, layer) -> list of (io op seq that loaded it, compute end) for in-flight computes
        self._pins: dict = defaultdict(list)

    def earliest_retrieve(self) -> float:
        """Earliest time the next batch's retrieval could start, ignoring its release time."""
        gate = 0.0
        if self._prev is not None:
            gate = self._prev.compute_start[0] if self.mode.overlap_retrieval else self._prev.compute_end[-1]
        return max(self.free["cpu"], gate)

    def submit(self, batch: InferBatch, release: float = 0.0) -> list[RequestResult]:
        L = self.backend.higher_layers
        prev = self._prev
        bid = batch.batch_id

        states, r_dur = stage_retrieve(batch, self.backend)
        r_start = max(self.earliest_retrieve(), release)
        r_end = self.trace.add(bid, "retrieve", None, r_start, r_start + r_dur, "cpu").end
        self.free["cpu"] = r_end

        if prev is None:
            gate = r_end
        elif self.mode.prefetch == "none":
            gate = max(r_end, prev.compute_end[-1])
        else:
            gate = max(r_end, prev.compute_start[0])
        pf_end, pf_seq, evictions = [], [], []
        for j in range(L):
            report = stage_prefetch(batch, j, self.pool, self.store)
            self.load_reports.append(report)
            self.peak_resident_bytes = max(self.peak_resident_bytes, self.pool.used_bytes)
            start = max(self.free["io"], gate if j == 0 else pf_end[-1])
            iv = self.trace.add(bid, "prefetch", j, start, start + report.transfer_ms, "io")
            self.free["io"] = iv.end
            self._io_seq += 1
            pf_end.append(iv.end)
            pf_seq.append(self._io_seq)
            evictions.extend((key, self._io_seq, iv.start) for key in report.evictions)

        c_start, c_end = [], []
        for j in range(L):
            states, c_dur = stage_compute(batch, j, states, self.backend, self.pool, self.store)
            ready = pf_end[j] if self.mode.prefetch == "layer" else pf_end[-1]
            deps = [self.free["compute"], r_end, ready]
            if c_end:
                deps.append(c_end[-1])
            start = max(deps)
            iv = self.trace.add(bid, "compute", j, start, start + c_dur, "compute")
            self.free["compute"] = iv.end
            c_start.append(iv.start)
            c_end.append(iv.end)
            for t in batch.task_ids:
                self._pins[(t, j)].append((pf_seq[j], iv.end))

        self._check_evictions(evictions)
        self._prev = _BatchTimes(c_start, c_end)
        outputs = self.backend.finish(batch, states)
        return [RequestResult(r.request_id, bid, out, r.enqueue_time, c_end[-1])
                for r, out in zip(batch.requests, outputs)]

    def _check_evictions(self, evictions):
        # a key evicted (in time) after its load but before the compute that
        # needed it finished means the prefetch window overflowed the device pool
        for key, seq, at in evictions:
            for loaded_seq, needed_until in self._pins.get(key, ()):
                if loaded_seq < seq and at < needed_until:
                    raise SchedulingError(
                        f"adapter {key} evicted at t={at:.4f} while in use until t={needed_until:.4f}; "
                        "device pool is smaller than the pipeline window")
        horizon = min(self.free.values())
        for key in list(self._pins):
            live = [p for p in self._pins[key] if p[1] > horizon]
            if live:
                self._pins[key] = live
            else:
                del self._pins[key]


def run(queue, mode, backend, pool: DeviceSlotPool, store: AdapterStore,
        releases: Optional[Sequence[float]] = None) -> tuple[list[RequestResult], StageTrace]:
    """Push every batch of ``queue`` through the pipeline; results come back in batch order."""
    batches = queue.drain() if isinstance(queue, RequestQueue) else list(queue)
    if not batches:
        raise ValueError("queue is empty")
    sim = PipelineSimulator(mode, backend, pool, store)
    results = []
    for i, batch in enumerate(batches):
        results.extend(sim.submit(batch, 0.0 if releases is None else releases[i]))
    return results, sim.trace


def throughput(n_requests: int, trace: StageTrace) -> float:
    """Requests per second over the trace makespan (virtual milliseconds)."""
    return n_requests / (trace.makespan / 1e3)


# -- config ----------------------------------------------------------------

@dataclass
class SchedulerConfig:
    max_batch_size: int = 16
    mode: str = "fine"
    backend: str = "numeric"
    retrieval_per_token_ms: float = 0.002
    compute_per_layer_ms: float = 1.0
    transfer_overhead_ms: float = 0.05
    transfer_bandwidth_bytes_per_ms: float = 12e6
    pool_capacity_bytes: int = 64 * 1024 * 1024
    max_wait_ms: float = 2.0

    def __post_init__(self):
        get_mode(self.mode)
        if self.backend not in ("numeric", "simulated"):
            raise ConfigurationError(f"unknown backend kind {self.backend!r}")
        if self.max_batch_size < 1:
            raise ConfigurationError("max_batch_size must be at least 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SchedulerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown scheduler config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "SchedulerConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data.get("scheduler", data))

    @property
    def latencies(self) -> Latencies:
        return Latencies(self.retrieval_per_token_ms, self.compute_per_layer_ms)

    @property
    def transfer_model(self) -> TransferModel:
        return TransferModel(self.transfer_overhead_ms, self.transfer_bandwidth_bytes_per_ms)

    def make_pool(self) -> DeviceSlotPool:
        return DeviceSlotPool(self.pool_capacity_bytes, self.transfer_model)
