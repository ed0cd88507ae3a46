"""Workloads, baseline serving schemes and metric reports on a virtual clock.

Four schemes are simulated on the same request stream:

``hplm``
    PLOT retrieval + shared higher stack + per-tenant adapters through the
    pipelined scheduler.
``dedicated_swap``
    one full model per tenant held in an LRU device cache of whole models.
``shared``
    a single full model serves everyone (no customization, no swapping).
``compressed``
    like ``dedicated_swap`` with a smaller distilled model.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .adapters import AdapterSet, AdapterStore, DeviceSlotPool, TransferModel
from .errors import AllocationError, CapacityError, ConfigurationError
from .scheduler import InferBatch, InferRequest, Latencies, PipelineSimulator, SimulatedBackend
from .transformer import AdapterParams

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MB = 1_000_000


# -- tenant allocation -----------------------------------------------------

def allocate_tenants(dataset_sizes: Sequence[int], tenants: int) -> list[int]:
    """Tenants per task, proportional to dataset size and floored.

    The remainder left by flooring goes round-robin to the largest tasks
    (ties by task order).
    """
    total = sum(dataset_sizes)
    if total <= 0:
        raise AllocationError("dataset sizes must sum to a positive number")
    counts = [size * tenants // total for size in dataset_sizes]
    if not any(counts):
        raise AllocationError(f"{tenants} tenants leave every task with zero after flooring")
    order = sorted(range(len(dataset_sizes)), key=lambda t: (-dataset_sizes[t], t))
    for i in range(tenants - sum(counts)):
        counts[order[i % len(order)]] += 1
    return counts


def tenant_subset_sizes(dataset_sizes: Sequence[int], counts: Sequence[int]) -> list[int]:
    """Per-tenant sample size |D_t| / n_t (0 for tasks without tenants)."""
    return [size // n if n else 0 for size, n in zip(dataset_sizes, counts)]


def sample_tenant_subsets(dataset_sizes: Sequence[int], counts: Sequence[int], seed: int = 0) -> list[list[np.ndarray]]:
    """Index subsets drawn uniformly with replacement from each task's dataset."""
    rng = np.random.default_rng(seed)
    sizes = tenant_subset_sizes(dataset_sizes, counts)
    return [[rng.integers(0, d, size=s) for _ in range(n)] for d, n, s in zip(dataset_sizes, counts, sizes)]


# -- workloads -------------------------------------------------------------

@dataclass(frozen=True)
class ConstantRate:
    interval_s: float = 20.0
    count: int = 100

    def __post_init__(self):
        if self.interval_s <= 0 or self.count < 0:
            raise ConfigurationError("interval must be positive and count non-negative")


@dataclass(frozen=True)
class Burst:
    threads: int = 250
    spawn_interval_s: float = 0.05
    per_thread_interval_s: float = 1.2
    per_thread_count: int = 50

    def __post_init__(self):
        if min(self.spawn_interval_s, self.per_thread_interval_s) <= 0:
            raise ConfigurationError("burst intervals must be positive")


@dataclass(frozen=True)
class WorkloadSpec:
    tenants: int
    arrival: Union[ConstantRate, Burst] = ConstantRate()
    tokens_per_request: int = 32
    seed: int = 0
    dataset_sizes: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.tenants < 1:
            raise ConfigurationError("need at least one tenant")


@dataclass(frozen=True)
class WorkloadRequest:
    index: int
    arrival_s: float
    tenant: int
    length: int


def generate_workload(spec: WorkloadSpec) -> list[WorkloadRequest]:
    """Deterministic timestamped request stream, ordered by arrival time."""
    rng = np.random.default_rng(spec.seed)
    arr = spec.arrival
    if isinstance(arr, ConstantRate):
        phase = rng.uniform(0.0, arr.interval_s, size=spec.tenants) if spec.tenants > 1 else np.zeros(1)
        steps = np.arange(arr.count) * arr.interval_s
        times = (phase[:, None] + steps[None, :]).ravel()
        tenants = np.repeat(np.arange(spec.tenants), arr.count)
    else:
        starts = np.arange(1, arr.threads + 1) * arr.spawn_interval_s
        steps = np.arange(arr.per_thread_count) * arr.per_thread_interval_s
        times = (starts[:, None] + steps[None, :]).ravel()
        tenants = rng.integers(0, spec.tenants, size=times.size)
    order = np.argsort(times, kind="stable")
    return [WorkloadRequest(i, float(times[k]), int(tenants[k]), spec.tokens_per_request)
            for i, k in enumerate(order)]


def uniform_stream(tenants: int, requests: int, tokens_per_request: int = 32, seed: int = 0) -> list[WorkloadRequest]:
    """``requests`` simultaneous arrivals, each from a tenant drawn uniformly at random."""
    rng = np.random.default_rng(seed)
    return [WorkloadRequest(i, 0.0, int(t), tokens_per_request)
            for i, t in enumerate(rng.integers(0, tenants, size=requests))]


def request_tokens(spec: WorkloadSpec, index: int, vocab_size: int) -> list[int]:
    rng = np.random.default_rng([spec.seed, index])
    return rng.integers(0, vocab_size, size=spec.tokens_per_request).tolist()


# -- configuration ---------------------------------------------------------

@dataclass
class BenchConfig:
    max_batch_size: int = 16
    higher_layers: int = 6
    full_model_layers: int = 12
    compute_per_layer_ms: float = 1.0
    retrieval_per_token_ms: float = 0.002
    transfer_overhead_ms: float = 0.05
    transfer_bandwidth_bytes_per_ms: float = 12e6
    adapter_hidden_size: int = 32
    adapter_bottleneck: int = 8
    adapter_pool_bytes: int = 4 * MB
    pipeline_mode: str = "fine"
    model_bytes: int = 418 * MB
    swap_cache_bytes: int = 35 * 418 * MB
    compressed_model_bytes: int = 55 * MB
    compressed_layer_fraction: float = 4 / 12

    @classmethod
    def from_file(cls, path) -> "BenchConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        data = data.get("bench", data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def transfer_model(self) -> TransferModel:
        return TransferModel(self.transfer_overhead_ms, self.transfer_bandwidth_bytes_per_ms)


@dataclass(frozen=True)
class BaselineMode:
    kind: str  # hplm | dedicated_swap | shared | compressed
    model_bytes: Optional[int] = None
    cache_capacity_bytes: Optional[int] = None
    layer_fraction: float = 1.0

    @classmethod
    def from_name(cls, name: str, cfg: BenchConfig) -> "BaselineMode":
        name = name.replace("-", "_")
        if name == "hplm":
            return cls("hplm")
        if name == "shared":
            return cls("shared")
        if name == "dedicated_swap":
            return cls("dedicated_swap", cfg.model_bytes, cfg.swap_cache_bytes)
        if name == "compressed":
            return cls("compressed", cfg.compressed_model_bytes, cfg.swap_cache_bytes, cfg.compressed_layer_fraction)
        raise ConfigurationError(f"unknown baseline mode {name!r}")


# -- metrics ---------------------------------------------------------------

@dataclass
class MetricsReport:
    mode: str
    tenants: int
    requests: int
    throughput_rps: float
    latencies_ms: np.ndarray = field(repr=False)
    hit_rate: float
    slowdown: float
    makespan_ms: float
    arrivals_ms: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    request_tenants: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int), repr=False)
    peak_device_bytes: int = 0

    @property
    def mean_ms(self) -> float:
        return float(self.latencies_ms.mean()) if self.latencies_ms.size else math.nan

    @property
    def p50_ms(self) -> float:
        return float(np.percentile(self.latencies_ms, 50)) if self.latencies_ms.size else math.nan

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.latencies_ms, 95)) if self.latencies_ms.size else math.nan

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        lat = np.sort(self.latencies_ms)
        return lat, np.arange(1, lat.size + 1) / max(lat.size, 1)

    def summary(self) -> dict:
        return {
            "mode": self.mode, "tenants": self.tenants, "requests": self.requests,
            "throughput_rps": self.throughput_rps, "mean_ms": self.mean_ms, "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms, "hit_rate": self.hit_rate, "slowdown": self.slowdown,
            "makespan_ms": self.makespan_ms,
        }


def _report(mode, tenants, stream, completions, hit_rate, compute_busy_ms, peak_bytes=0) -> MetricsReport:
    arrivals = np.array([r.arrival_s * 1e3 for r in stream])
    done = np.asarray(completions, dtype=float)
    if not stream:
        return MetricsReport(mode, tenants, 0, 0.0, np.zeros(0), hit_rate, math.nan, 0.0)
    makespan = float(done.max() - arrivals.min())
    return MetricsReport(
        mode, tenants, len(stream), len(stream) / (makespan / 1e3) if makespan > 0 else math.inf,
        done - arrivals, hit_rate, makespan / compute_busy_ms if compute_busy_ms else math.nan, makespan,
        arrivals, np.array([r.tenant for r in stream]), peak_bytes,
    )


# -- simulations -----------------------------------------------------------

def placeholder_store(tenants: int, cfg: BenchConfig) -> AdapterStore:
    """Zero-valued adapter sets; the simulated backend only needs their byte sizes."""
    store = AdapterStore()
    d, r = cfg.adapter_hidden_size, cfg.adapter_bottleneck
    layers = [AdapterParams.zeros(i, d, r) for i in range(cfg.higher_layers)]
    for t in range(tenants):
        store.register(AdapterSet(f"tenant-{t}", layers))
    return store


def _simulate_hplm(stream, tenants, cfg: BenchConfig, store: Optional[AdapterStore]):
    store = store or placeholder_store(tenants, cfg)
    pool = DeviceSlotPool(cfg.adapter_pool_bytes, cfg.transfer_model)
    backend = SimulatedBackend(cfg.higher_layers, Latencies(cfg.retrieval_per_token_ms, cfg.compute_per_layer_ms))
    sim = PipelineSimulator(cfg.pipeline_mode, backend, pool, store)
    task_ids = store.task_ids()
    completions = [0.0] * len(stream)
    pending = deque(stream)
    batch_id = 0
    while pending:
        t = max(sim.earliest_retrieve(), pending[0].arrival_s * 1e3)
        reqs = []
        while pending and len(reqs) < cfg.max_batch_size and pending[0].arrival_s * 1e3 <= t:
            w = pending.popleft()
            tid = task_ids[w.tenant % len(task_ids)]
            reqs.append(InferRequest(w.index, tid, tid, 0, tid, (0,) * w.length, w.arrival_s * 1e3))
        for res in sim.submit(InferBatch(batch_id, reqs), release=t):
            completions[res.request_id] = res.completion_time
        batch_id += 1
    reports = sim.load_reports
    hits = sum(len(r.hits) for r in reports)
    accesses = hits + sum(len(r.loads) for r in reports)
    return completions, hits / accesses if accesses else 1.0, sim.trace.busy("compute"), sim.peak_resident_bytes


def _simulate_swap(stream, cfg: BenchConfig, model_bytes: int, capacity: int, layers: float):
    if capacity < model_bytes:
        raise CapacityError(f"swap cache of {capacity} bytes cannot hold one {model_bytes}-byte model")
    cache = DeviceSlotPool(capacity, cfg.transfer_model)
    compute_ms = cfg.compute_per_layer_ms * layers
    completions = [0.0] * len(stream)
    pending = deque(stream)
    free = 0.0
    hits = accesses = 0
    busy = 0.0
    while pending:
        t = max(free, pending[0].arrival_s * 1e3)
        batch = []
        while pending and len(batch) < cfg.max_batch_size and pending[0].arrival_s * 1e3 <= t:
            batch.append(pending.popleft())
        # one mini-batch per distinct tenant, in order of first appearance
        groups: dict[int, list] = {}
        for w in batch:
            groups.setdefault(w.tenant, []).append(w)
        for tenant, members in groups.items():
            report = cache.access([(tenant, model_bytes)])
            accesses += 1
            hits += len(report.hits)
            t += report.transfer_ms + compute_ms
            busy += compute_ms
            for w in members:
                completions[w.index] = t
        free = t
    return completions, hits / accesses if accesses else 1.0, busy, cache.peak_bytes


def _simulate_shared(stream, cfg: BenchConfig):
    compute_ms = cfg.compute_per_layer_ms * cfg.full_model_layers
    completions = [0.0] * len(stream)
    pending = deque(stream)
    free = busy = 0.0
    while pending:
        t = max(free, pending[0].arrival_s * 1e3)
        batch = []
        while pending and len(batch) < cfg.max_batch_size and pending[0].arrival_s * 1e3 <= t:
            batch.append(pending.popleft())
        t += compute_ms
        busy += compute_ms
        for w in batch:
            completions[w.index] = t
        free = t
    return completions, 1.0, busy, 0


def run_baseline(mode: Union[str, BaselineMode], workload: Union[WorkloadSpec, Sequence[WorkloadRequest]],
                 cfg: BenchConfig = BenchConfig(), tenants: Optional[int] = None,
                 store: Optional[AdapterStore] = None, saturate: bool = False) -> MetricsReport:
    """Serve ``workload`` under one scheme and collect throughput / latency / cache metrics.

    With ``saturate`` every request is queued at t=0, which measures peak
    throughput rather than response time under the arrival process.
    """
    if isinstance(mode, str):
        mode = BaselineMode.from_name(mode, cfg)
    if isinstance(workload, WorkloadSpec):
        tenants = workload.tenants
        stream = generate_workload(workload)
    else:
        stream = list(workload)
        tenants = tenants or (max((w.tenant for w in stream), default=0) + 1)
    if saturate:
        stream = [WorkloadRequest(w.index, 0.0, w.tenant, w.length) for w in stream]
    if mode.kind == "hplm":
        outcome = _simulate_hplm(stream, tenants, cfg, store)
    elif mode.kind in ("dedicated_swap", "compressed"):
        layers = cfg.full_model_layers * mode.layer_fraction
        outcome = _simulate_swap(stream, cfg, mode.model_bytes, mode.cache_capacity_bytes, layers)
    elif mode.kind == "shared":
        outcome = _simulate_shared(stream, cfg)
    else:
        raise ConfigurationError(f"unknown baseline kind {mode.kind!r}")
    return _report(mode.kind, tenants, stream, *outcome)


def lru_hit_rate(tenants: int, slots: int, accesses: int, seed: int = 0, warmup: Optional[int] = None) -> float:
    """Steady-state hit rate of an LRU cache of ``slots`` whole models under uniform tenant access."""
    pool = DeviceSlotPool(slots)
    rng = np.random.default_rng(seed)
    warmup = 10 * slots if warmup is None else warmup
    hits = 0
    for i, tenant in enumerate(rng.integers(0, tenants, size=warmup + accesses).tolist()):
        report = pool.access([(tenant, 1)])
        if i >= warmup:
            hits += len(report.hits)
    return hits / accesses


# -- report files ----------------------------------------------------------

SUMMARY_FIELDS = ("mode", "tenants", "requests", "throughput_rps", "mean_ms", "p50_ms", "p95_ms",
                  "hit_rate", "slowdown", "makespan_ms")


def _write_csv(path: Path, description: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {description}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(line for line in fh if not line.startswith("#"))]
    return rows[0], rows[1:]


def emit_report(report: MetricsReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("summary", "cdf", "responses")}
    summary = report.summary()
    _write_csv(paths["summary"], "one row per run; latencies in virtual milliseconds, throughput in requests/s",
               SUMMARY_FIELDS, [[summary[k] for k in SUMMARY_FIELDS]])
    lat, frac = report.cdf()
    _write_csv(paths["cdf"], "empirical CDF of end-to-end response time (queue entry to output)",
               ("latency_ms", "cumulative_fraction"), zip(lat.tolist(), frac.tolist()))
    rows = []
    if report.latencies_ms.size:
        rows = zip(range(report.requests), report.request_tenants.tolist(), report.arrivals_ms.tolist(),
                   (report.arrivals_ms + report.latencies_ms).tolist(), report.latencies_ms.tolist())
    _write_csv(paths["responses"], "per-request timings in virtual milliseconds",
               ("request_index", "tenant", "arrival_ms", "completion_ms", "latency_ms"), rows)
    text = out / "summary.txt"
    text.write_text("\n".join(f"{k}: {v}" for k, v in summary.items()) + "\n")
    paths["text"] = text
    return paths


def read_report(out_dir) -> MetricsReport:
    out = Path(out_dir)
    header, rows = _read_csv(out / "summary.csv")
    s = dict(zip(header, rows[0]))
    _, resp = _read_csv(out / "responses.csv")
    arrivals = np.array([float(r[2]) for r in resp])
    return MetricsReport(
        s["mode"], int(s["tenants"]), int(s["requests"]), float(s["throughput_rps"]),
        np.array([float(r[4]) for r in resp]), float(s["hit_rate"]), float(s["slowdown"]),
        float(s["makespan_ms"]), arrivals, np.array([int(r[1]) for r in resp], dtype=int),
    )


def pipeline_ablation(cfg: BenchConfig, tenants: int = 16, requests: int = 1000, seed: int = 0) -> dict[str, float]:
    """Saturated throughput of every pipeline variant on one request stream."""
    stream = uniform_stream(tenants, requests, seed=seed)
    out = {}
    for mode in ("sync", "no_adapter_overlap", "no_retrieval_overlap", "coarse", "fine"):
        run_cfg = BenchConfig(**{**asdict(cfg), "pipeline_mode": mode})
        out[mode] = run_baseline("hplm", stream, run_cfg, tenants=tenants, saturate=True).throughput_rps
    return out
