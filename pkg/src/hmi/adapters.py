"""Adapter sets: host store, simulated device residency, and batched application."""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Iterable, Optional, Sequence

import numpy as np

from . import tensor
from .errors import CapacityError, ConflictError, DimensionError, FormatError, NotFoundError
from .transformer import AdapterParams, random_adapter

DEVICE_BYTES_PER_PARAM = 4  # adapters live on device as float32


@dataclass
class AdapterSet:
    task_id: str
    layers: list[AdapterParams]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("adapter set needs at least one layer")
        r = {p.bottleneck for p in self.layers}
        d = {p.hidden_size for p in self.layers}
        if len(r) != 1 or len(d) != 1:
            raise DimensionError(f"adapter set {self.task_id!r} mixes shapes (r={sorted(r)}, d={sorted(d)})")

    @property
    def hidden_size(self) -> int:
        return self.layers[0].hidden_size

    @property
    def bottleneck(self) -> int:
        return self.layers[0].bottleneck

    @property
    def parameter_count(self) -> int:
        return sum(p.parameter_count for p in self.layers)

    @property
    def byte_size(self) -> int:
        return self.parameter_count * DEVICE_BYTES_PER_PARAM

    def layer_bytes(self, layer_index: int) -> int:
        return self.layers[layer_index].parameter_count * DEVICE_BYTES_PER_PARAM


def seeded_adapter_set(task_id: str, higher_layers: int, d: int, r: int, seed: int) -> AdapterSet:
    rng = np.random.default_rng(seed)
    return AdapterSet(task_id, [random_adapter(rng, i, d, r) for i in range(higher_layers)])


class AdapterStore:
    """Unbounded host-memory store of adapter sets keyed by task id."""

    def __init__(self):
        self._sets: dict[str, AdapterSet] = {}
        self._lock = threading.Lock()

    def register(self, adapter_set: AdapterSet) -> None:
        with self._lock:
            if adapter_set.task_id in self._sets:
                raise ConflictError(f"task {adapter_set.task_id!r} already registered")
            self._sets[adapter_set.task_id] = adapter_set

    def replace(self, adapter_set: AdapterSet) -> None:
        with self._lock:
            if adapter_set.task_id not in self._sets:
                raise NotFoundError(f"unknown task {adapter_set.task_id!r}")
            self._sets[adapter_set.task_id] = adapter_set

    def remove(self, task_id: str) -> AdapterSet:
        with self._lock:
            try:
                return self._sets.pop(task_id)
            except KeyError:
                raise NotFoundError(f"unknown task {task_id!r}") from None

    def get(self, task_id: str) -> AdapterSet:
        try:
            return self._sets[task_id]
        except KeyError:
            raise NotFoundError(f"unknown task {task_id!r}") from None

    def __contains__(self, task_id) -> bool:
        return task_id in self._sets

    def __len__(self) -> int:
        return len(self._sets)

    def task_ids(self) -> list[str]:
        return list(self._sets)


@dataclass(frozen=True)
class TransferModel:
    """Host→device copy time: ``overhead_ms + bytes / bandwidth``."""

    overhead_ms: float = 0.05
    bandwidth_bytes_per_ms: float = 12e9 / 1e3  # 12 GB/s, roughly PCIe 3.0 x16

    def __call__(self, nbytes: int) -> float:
        return self.overhead_ms + nbytes / self.bandwidth_bytes_per_ms


@dataclass
class Residency:
    bytes: int
    last_used: int


@dataclass
class LoadReport:
    hits: list[Hashable] = field(default_factory=list)
    loads: list[tuple[Hashable, int, float]] = field(default_factory=list)  # (key, bytes, ms)
    evictions: list[Hashable] = field(default_factory=list)

    @property
    def transfer_ms(self) -> float:
        return sum(ms for _, _, ms in self.loads)

    @property
    def loaded_bytes(self) -> int:
        return sum(b for _, b, _ in self.loads)


class DeviceSlotPool:
    """Bounded LRU residency of device-side blobs, keyed by any hashable.

    Keys are task ids for whole adapter sets or ``(task_id, layer)`` pairs for
    per-layer residency.  All mutations go through one lock.
    """

    def __init__(self, capacity_bytes: int, transfer_model: Optional[Callable[[int], float]] = None):
        if capacity_bytes <= 0:
            raise CapacityError("device capacity must be positive")
        self.capacity_bytes = int(capacity_bytes)
        self.transfer_model = transfer_model or TransferModel()
        self.resident: OrderedDict[Hashable, Residency] = OrderedDict()
        self.used_bytes = 0
        self.peak_bytes = 0
        self.tick = 0
        self._lock = threading.Lock()

    def is_resident(self, key) -> bool:
        return key in self.resident

    def snapshot(self) -> dict[Hashable, Residency]:
        with self._lock:
            return {k: Residency(v.bytes, v.last_used) for k, v in self.resident.items()}

    def evict(self, key) -> bool:
        with self._lock:
            rec = self.resident.pop(key, None)
            if rec is None:
                return False
            self.used_bytes -= rec.bytes
            return True

    def evict_where(self, predicate: Callable[[Hashable], bool]) -> list[Hashable]:
        with self._lock:
            gone = [k for k in self.resident if predicate(k)]
            for k in gone:
                self.used_bytes -= self.resident.pop(k).bytes
            return gone

    def access(self, items: Iterable[tuple[Hashable, int]], report: Optional[LoadReport] = None) -> LoadReport:
        """Make every ``(key, nbytes)`` resident, evicting least-recently-used keys as needed.

        Keys requested in the same call are never evicted to make room for
        each other; if they cannot all fit, ``CapacityError`` is raised
        before anything changes.
        """
        report = report if report is not None else LoadReport()
        wanted: dict[Hashable, int] = {}
        for key, nbytes in items:
            wanted.setdefault(key, int(nbytes))
        with self._lock:
            if sum(wanted.values()) > self.capacity_bytes:
                raise CapacityError(
                    f"{sum(wanted.values())} bytes requested at once exceed capacity {self.capacity_bytes}")
            # touch hits first so the LRU victim is never a key wanted by this call
            misses = []
            for key, nbytes in wanted.items():
                rec = self.resident.get(key)
                if rec is None:
                    misses.append((key, nbytes))
                    continue
                self.tick += 1
                rec.last_used = self.tick
                self.resident.move_to_end(key)
                report.hits.append(key)
            for key, nbytes in misses:
                self.tick += 1
                while self.used_bytes + nbytes > self.capacity_bytes:
                    victim, rec = self.resident.popitem(last=False)
                    self.used_bytes -= rec.bytes
                    report.evictions.append(victim)
                self.resident[key] = Residency(nbytes, self.tick)
                self.used_bytes += nbytes
                self.peak_bytes = max(self.peak_bytes, self.used_bytes)
                report.loads.append((key, nbytes, float(self.transfer_model(nbytes))))
        return report


def ensure_resident(pool: DeviceSlotPool, store: AdapterStore, task_ids: Sequence[str],
                    layer_index: Optional[int] = None) -> LoadReport:
    """Load the named adapter sets (or just one layer of each) onto the device pool."""
    items = []
    for task_id in task_ids:
        aset = store.get(task_id)
        if layer_index is None:
            items.append((task_id, aset.byte_size))
        else:
            items.append(((task_id, layer_index), aset.layer_bytes(layer_index)))
    return pool.access(items)


@dataclass
class StackedAdapters:
    layer_index: int
    w_down: np.ndarray  # B x d x r
    b_down: np.ndarray  # B x r
    w_up: np.ndarray  # B x r x d
    b_up: np.ndarray  # B x d

    @property
    def batch(self) -> int:
        return self.w_down.shape[0]


def stack(sets: Sequence[AdapterSet], layer_index: int) -> StackedAdapters:
    if not sets:
        raise DimensionError("cannot stack an empty list of adapter sets")
    shapes = {(s.hidden_size, s.bottleneck) for s in sets}
    if len(shapes) != 1:
        raise DimensionError(f"heterogeneous adapter shapes {sorted(shapes)}")
    if not 0 <= layer_index < len(sets[0].layers):
        raise DimensionError(f"layer {layer_index} out of range")
    params = [s.layers[layer_index] for s in sets]
    return StackedAdapters(
        layer_index,
        np.stack([p.w_down for p in params]),
        np.stack([p.b_down for p in params]),
        np.stack([p.w_up for p in params]),
        np.stack([p.b_up for p in params]),
    )


def batched_adapter_apply(h_batch, stacked: StackedAdapters) -> np.ndarray:
    """Element i is ``adapter_apply(h_batch[i], params_i)``, via two batched products."""
    h = tensor.as_batch(h_batch, "h_batch")
    if h.shape[0] != stacked.batch:
        raise DimensionError(f"{h.shape[0]} inputs for {stacked.batch} stacked adapters")
    if h.shape[2] != stacked.w_down.shape[1]:
        raise DimensionError(f"inputs have {h.shape[2]} columns, adapters expect {stacked.w_down.shape[1]}")
    z = tensor.relu(tensor.batched_matmul(stacked.b_down[:, None, :], h, stacked.w_down))
    return tensor.batched_matmul(stacked.b_up[:, None, :], z, stacked.w_up) + h


# -- ADP1 file format ------------------------------------------------------

ADAPTER_MAGIC = b"ADP1"


def save_adapter_set(aset: AdapterSet, path) -> None:
    tid = aset.task_id.encode("utf-8")
    parts = [ADAPTER_MAGIC, struct.pack("<I", len(tid)), tid,
             struct.pack("<III", len(aset.layers), aset.hidden_size, aset.bottleneck)]
    for p in aset.layers:
        for arr in (p.w_down, p.b_down, p.w_up, p.b_up):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_adapter_set(path) -> AdapterSet:
    data = Path(path).read_bytes()
    if data[:4] != ADAPTER_MAGIC:
        raise FormatError("bad adapter magic", 0)
    pos = 4
    if len(data) < pos + 4:
        raise FormatError("truncated header", pos)
    (tlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + tlen + 12:
        raise FormatError("truncated header", pos)
    try:
        task_id = data[pos:pos + tlen].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("task id is not UTF-8", pos) from None
    pos += tlen
    layers_n, d, r = struct.unpack_from("<III", data, pos)
    pos += 12
    if not 0 < r < d:
        raise FormatError(f"invalid adapter dims d={d} r={r}", pos - 8)
    layers = []
    for i in range(layers_n):
        arrays = []
        for shape in ((d, r), (r,), (r, d), (d,)):
            count = int(np.prod(shape))
            if pos + 4 * count > len(data):
                raise FormatError(f"truncated weights in layer {i}", pos)
            arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos)
                          .astype(np.float64).reshape(shape))
            pos += 4 * count
        layers.append(AdapterParams(i, *arrays))
    if pos != len(data):
        raise FormatError("trailing bytes after adapter weights", pos)
    return AdapterSet(task_id, layers)
