"""Dispatcher and manager: `manage` / `infer` handling over a shared backbone.

`HMIServer` owns the version tree, the adapter store, the device pool, the
tenant registry and the input queue.  A single worker thread drains the
queue through the pipeline; manage operations that touch shared state take
the same lock, so they land between batches, never inside one.
"""

from __future__ import annotations

import itertools
import json
import logging
import threading
import time
from concurrent.futures import Future
from dataclasses import asdict, dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import plot
from .adapters import AdapterSet, AdapterStore, load_adapter_set, save_adapter_set, seeded_adapter_set
from .errors import ConflictError, HMIError, NotFoundError, RoutingError, ValidationError
from .scheduler import (InferBatch, InferRequest, NumericBackend, PipelineSimulator, RequestQueue,
                        SchedulerConfig)
from .transformer import HEAD_KINDS, Model, OutputHead, random_head

log = logging.getLogger(__name__)

MANAGE_OPS = ("create_domain", "update_domain", "create_instance", "update_instance", "delete_instance")


@dataclass
class InstanceRecord:
    instance_id: str
    tenant_id: str
    version_id: int
    task_id: str
    head_kind: str
    labels: int
    head_seed: int
    adapter_seed: Optional[int] = None
    adapter_path: Optional[str] = None


@dataclass
class DomainRecord:
    version_id: int
    tenant_id: str
    domain_label: str
    alpha_percent: float
    domain_seed: int
    corpus: list[list[int]] = field(repr=False, default_factory=list)


class TenantRegistry:
    def __init__(self):
        self.tenants: dict[str, set[str]] = {}
        self.instances: dict[str, InstanceRecord] = {}
        self.lock = threading.RLock()

    def add(self, rec: InstanceRecord) -> None:
        with self.lock:
            if rec.instance_id in self.instances:
                raise ConflictError(f"instance {rec.instance_id!r} exists")
            self.instances[rec.instance_id] = rec
            self.tenants.setdefault(rec.tenant_id, set()).add(rec.instance_id)

    def get(self, instance_id: str, tenant_id: Optional[str] = None) -> InstanceRecord:
        rec = self.instances.get(instance_id)
        if rec is None or (tenant_id is not None and rec.tenant_id != tenant_id):
            raise NotFoundError(f"unknown instance {instance_id!r}")
        return rec

    def remove(self, instance_id: str) -> InstanceRecord:
        with self.lock:
            rec = self.instances.pop(instance_id)
            owned = self.tenants.get(rec.tenant_id)
            if owned is not None:
                owned.discard(instance_id)
                if not owned:
                    del self.tenants[rec.tenant_id]
            return rec


@dataclass
class InferResult:
    request_id: int
    instance_id: str
    output: dict
    queue_ms: float
    total_ms: float
    batch_id: int
    raw: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"request_id": self.request_id, "output": self.output,
                "timings": {"queue_ms": self.queue_ms, "total_ms": self.total_ms}}


def format_output(kind: str, raw: np.ndarray) -> dict:
    if kind == "cls_classify":
        return {"label": int(np.argmax(raw)), "scores": raw.tolist()}
    if kind == "token_tag":
        return {"tags": np.argmax(raw, axis=-1).tolist()}
    last = raw[-1]
    return {"label": int(np.argmax(last)), "scores": last.tolist()}


class HMIServer:
    def __init__(self, model: Model, root: plot.PlotTable, config: SchedulerConfig = SchedulerConfig(),
                 min_corpus_tokens: int = 10_000):
        self.model = model
        self.config = config
        self.min_corpus_tokens = min_corpus_tokens
        self.tree = plot.VersionTree(root)
        self.store = AdapterStore()
        self.pool = config.make_pool()
        self.registry = TenantRegistry()
        self.heads: dict[str, OutputHead] = {}
        self.domains: dict[int, DomainRecord] = {}
        self.backend = NumericBackend(model, self.tree, config.latencies)
        self.queue = RequestQueue(config.max_batch_size)
        self.batch_log: list[int] = []
        self.counts = {"enqueued": 0, "completed": 0, "rejected": 0}

        self._state_lock = threading.RLock()  # held for a whole batch or manage op
        self._cond = threading.Condition()
        self._futures: dict[int, Future] = {}
        self._first_wait: Optional[float] = None
        self._request_ids = itertools.count()
        self._instance_ids = itertools.count(1)
        self._worker: Optional[threading.Thread] = None
        self._running = False
        self._paused = False

    # -- lifecycle -------------------------------------------------------

    def start(self) -> "HMIServer":
        if self._worker is None:
            self._running = True
            self._worker = threading.Thread(target=self._loop, name="hmi-scheduler", daemon=True)
            self._worker.start()
        return self

    def stop(self) -> None:
        with self._cond:
            self._running = False
            self._cond.notify_all()
        if self._worker is not None:
            self._worker.join()
            self._worker = None
        self._process(self.queue.drain())

    def pause(self) -> None:
        """Hold batches in the queue (they keep filling) until ``resume``."""
        with self._cond:
            self._paused = True

    def resume(self) -> None:
        with self._cond:
            self._paused = False
            self._cond.notify_all()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- infer -----------------------------------------------------------

    def submit(self, tenant_id: str, instance_id: str, tokens) -> Future:
        try:
            tokens = [int(t) for t in tokens]
        except (TypeError, ValueError):
            raise ValidationError("tokens must be a list of integers") from None
        vocab = self.model.config.vocab_size
        if not tokens or any(not 0 <= t < vocab for t in tokens):
            raise ValidationError(f"tokens must be a non-empty list of ids in [0, {vocab})")
        with self.registry.lock:
            try:
                rec = self.registry.get(instance_id, tenant_id)
            except NotFoundError:
                raise RoutingError(f"unknown instance {instance_id!r} for tenant {tenant_id!r}") from None
            head = self.heads[rec.instance_id]
        fut: Future = Future()
        with self._cond:
            rid = next(self._request_ids)
            req = InferRequest(rid, tenant_id, instance_id, rec.version_id, rec.task_id, tokens,
                               time.monotonic(), head)
            self.queue.enqueue(req)
            self._futures[rid] = fut
            self.counts["enqueued"] += 1
            if self._first_wait is None:
                self._first_wait = req.enqueue_time
            self._cond.notify_all()
        return fut

    def handle_infer(self, body: dict, timeout: Optional[float] = None) -> InferResult:
        return self.submit(body.get("tenant_id"), body.get("instance_id"), body.get("tokens") or []).result(timeout)

    def _take_batches(self) -> list[InferBatch]:
        """Called with ``_cond`` held: full batches, plus the open one once it waited long enough."""
        if self._paused or not self.queue.batches:
            return []
        out = []
        while len(self.queue.batches) > 1:
            out.append(self.queue.pop_batch())
        waited_ms = (time.monotonic() - (self._first_wait or time.monotonic())) * 1e3
        last = self.queue.batches[0]
        if len(last) >= self.queue.max_batch_size or waited_ms >= self.config.max_wait_ms or not self._running:
            out.append(self.queue.pop_batch())
            self._first_wait = None
        elif out:
            self._first_wait = min(r.enqueue_time for r in last.requests)
        return out

    def _loop(self) -> None:
        while True:
            with self._cond:
                while True:
                    batches = self._take_batches()
                    if batches or not self._running:
                        break
                    self._cond.wait(self.config.max_wait_ms / 1e3 if self.queue.batches else None)
            if batches:
                self._process(batches)
            elif not self._running:
                return

    def _process(self, batches: list[InferBatch]) -> None:
        if not batches:
            return
        with self._state_lock:
            sim = PipelineSimulator(self.config.mode, self.backend, self.pool, self.store)
            for batch in batches:
                live, dead = [], []
                for r in batch.requests:
                    ok = r.instance_id in self.registry.instances and r.task_id in self.store
                    (live if ok else dead).append(r)
                for r in dead:
                    self._fail(r.request_id, RoutingError(f"instance {r.instance_id!r} was deleted"))
                if not live:
                    continue
                batch = InferBatch(batch.batch_id, live)
                self.batch_log.append(len(batch))
                try:
                    results = sim.submit(batch)
                except Exception as exc:  # pragma: no cover - surfaced to every caller
                    log.exception("batch %d failed", batch.batch_id)
                    for r in live:
                        self._fail(r.request_id, exc)
                    continue
                done = time.monotonic()
                dequeued = done  # the batch is dequeued and finished within this critical section
                for r, res in zip(live, results):
                    out = InferResult(r.request_id, r.instance_id, format_output(r.head.kind, res.output),
                                      (dequeued - r.enqueue_time) * 1e3, (done - r.enqueue_time) * 1e3,
                                      batch.batch_id, res.output)
                    with self._cond:
                        fut = self._futures.pop(r.request_id)
                        self.counts["completed"] += 1
                    fut.set_result(out)

    def _fail(self, request_id: int, exc: Exception) -> None:
        with self._cond:
            fut = self._futures.pop(request_id)
            self.counts["rejected"] += 1
        fut.set_exception(exc)

    # -- manage ----------------------------------------------------------

    def handle_manage(self, body: dict) -> dict:
        op = body.get("op")
        if op not in MANAGE_OPS:
            raise ValidationError(f"unknown manage op {op!r}")
        tenant = body.get("tenant_id")
        if not tenant:
            raise ValidationError("tenant_id is required")
        with self._state_lock:
            return getattr(self, f"_op_{op}")(tenant, body)

    def _corpus(self, body: dict) -> list[list[int]]:
        if "corpus_path" in body:
            corpus = json.loads(Path(body["corpus_path"]).read_text())
        elif "corpus" in body:
            corpus = body["corpus"]
        else:
            raise ValidationError("corpus or corpus_path is required")
        try:
            corpus = [[int(t) for t in seq] for seq in corpus]
        except (TypeError, ValueError):
            raise ValidationError("corpus must be a list of token-id lists") from None
        vocab = self.model.config.vocab_size
        if any(not 0 <= t < vocab for seq in corpus for t in seq):
            raise ValidationError("corpus contains token ids outside the vocabulary")
        return corpus

    def _derive(self, tenant, corpus, label, alpha, seed, parent_id) -> int:
        size = sum(len(s) for s in corpus)
        if size < self.min_corpus_tokens:
            raise ValidationError(f"domain corpus has {size} tokens; at least {self.min_corpus_tokens} required")
        if not 0 <= alpha <= 100:
            raise ValidationError("alpha must be within [0, 100]")
        domain_model = self.model.with_lower_reseeded(seed)
        vid = self.tree.next_version_id()
        table = plot.derive_branch(self.tree.root, corpus, domain_model, alpha, version_id=vid,
                                   domain_label=label, parent_id=parent_id)
        with self.registry.lock:
            self.tree.add_branch(table)
            self.domains[vid] = DomainRecord(vid, tenant, label, float(alpha), seed, corpus)
        return vid

    def _op_create_domain(self, tenant: str, body: dict) -> dict:
        label = body.get("domain_label")
        if not label:
            raise ValidationError("domain_label is required")
        if any(d.domain_label == label for d in self.domains.values()):
            raise ConflictError(f"domain {label!r} exists; use update_domain")
        corpus = self._corpus(body)
        seed = int(body.get("domain_seed", sum(label.encode()) + 7919))
        vid = self._derive(tenant, corpus, label, float(body.get("alpha", 50)), seed, self.tree.root.version_id)
        return {"status": "created", "version_id": vid}

    def _op_update_domain(self, tenant: str, body: dict) -> dict:
        try:
            base = self.domains[int(body["version_id"])]
        except (KeyError, TypeError, ValueError):
            raise NotFoundError(f"unknown domain version {body.get('version_id')!r}") from None
        corpus = base.corpus + self._corpus(body)
        alpha = float(body.get("alpha", base.alpha_percent))
        vid = self._derive(tenant, corpus, base.domain_label, alpha, base.domain_seed, base.version_id)
        return {"status": "updated", "version_id": vid}

    def _adapter_from(self, body: dict, task_id: str, default_seed: int) -> tuple[AdapterSet, Optional[int], Optional[str]]:
        cfg = self.model.config
        if "adapter_path" in body:
            loaded = load_adapter_set(body["adapter_path"])
            if (len(loaded.layers), loaded.hidden_size) != (cfg.higher_layers, cfg.hidden_size):
                raise ValidationError("adapter file does not match the model's higher stack")
            return AdapterSet(task_id, loaded.layers), None, str(body["adapter_path"])
        seed = int(body.get("adapter_seed", default_seed))
        aset = seeded_adapter_set(task_id, cfg.higher_layers, cfg.hidden_size, cfg.adapter_bottleneck, seed)
        return aset, seed, None

    def _op_create_instance(self, tenant: str, body: dict) -> dict:
        version_id = int(body.get("version_id", self.tree.root.version_id))
        if not self.tree.has_version(version_id):
            raise NotFoundError(f"unknown version {version_id}")
        head_spec = body.get("head") or {}
        kind = head_spec.get("kind", "cls_classify")
        if kind not in HEAD_KINDS:
            raise ValidationError(f"head kind must be one of {HEAD_KINDS}")
        labels = int(head_spec.get("labels", self.model.config.vocab_size if kind == "lm_logits" else 2))
        if labels < 1:
            raise ValidationError("head needs at least one label")
        number = next(self._instance_ids)
        instance_id = body.get("instance_id") or f"inst-{number:06d}"
        if instance_id in self.registry.instances:
            raise ConflictError(f"instance {instance_id!r} exists")
        aset, aseed, apath = self._adapter_from(body, instance_id, 1_000_003 * number + 17)
        head_seed = int(head_spec.get("seed", 2_000_029 * number + 5))
        rec = InstanceRecord(instance_id, tenant, version_id, instance_id, kind, labels, head_seed, aseed, apath)
        head = random_head(np.random.default_rng(head_seed), instance_id, kind, self.model.config.hidden_size, labels)
        with self.registry.lock:
            self.store.register(aset)
            self.heads[instance_id] = head
            self.registry.add(rec)
        return {"status": "created", "instance_id": instance_id}

    def _op_update_instance(self, tenant: str, body: dict) -> dict:
        rec = self.registry.get(body.get("instance_id"), tenant)
        if "version_id" in body:
            vid = int(body["version_id"])
            if not self.tree.has_version(vid):
                raise NotFoundError(f"unknown version {vid}")
            rec.version_id = vid
        if "adapter_path" in body or "adapter_seed" in body:
            aset, rec.adapter_seed, rec.adapter_path = self._adapter_from(body, rec.task_id, 0)
            with self.registry.lock:
                self.store.replace(aset)
                self.pool.evict_where(lambda k: k == rec.task_id or (isinstance(k, tuple) and k[0] == rec.task_id))
        return {"status": "updated", "instance_id": rec.instance_id}

    def _op_delete_instance(self, tenant: str, body: dict) -> dict:
        rec = self.registry.get(body.get("instance_id"), tenant)
        with self.registry.lock:
            self.registry.remove(rec.instance_id)
            self.heads.pop(rec.instance_id, None)
            self.store.remove(rec.task_id)
            self.pool.evict_where(lambda k: k == rec.task_id or (isinstance(k, tuple) and k[0] == rec.task_id))
        return {"status": "deleted", "instance_id": rec.instance_id}

    # -- state -----------------------------------------------------------

    def snapshot_state(self) -> dict:
        with self.registry.lock:
            root = self.tree.root
            versions = [{"version_id": root.version_id, "parent_id": None, "domain_label": root.domain_label,
                         "alpha_percent": None, "entries": len(root)}]
            for vid, t in sorted(self.tree.branches.items()):
                versions.append({"version_id": vid, "parent_id": t.parent_id, "domain_label": t.domain_label,
                                 "alpha_percent": t.alpha_percent, "entries": len(t)})
            return {
                "versions": versions,
                "domains": [{k: v for k, v in asdict(d).items() if k != "corpus"} for d in self.domains.values()],
                "tenants": {t: sorted(ids) for t, ids in sorted(self.registry.tenants.items())},
                "instances": [asdict(r) for r in self.registry.instances.values()],
                "device": {"capacity_bytes": self.pool.capacity_bytes, "used_bytes": self.pool.used_bytes,
                           "resident": len(self.pool.resident)},
            }

    def save_state(self, directory) -> Path:
        """Write the snapshot plus branch tables, domain corpora and adapter sets to ``directory``."""
        directory = Path(directory)
        (directory / "branches").mkdir(parents=True, exist_ok=True)
        (directory / "adapters").mkdir(exist_ok=True)
        with self._state_lock, self.registry.lock:
            snap = self.snapshot_state()
            snap["next_instance_number"] = next(self._instance_ids)
            self._instance_ids = itertools.count(snap["next_instance_number"])
            snap["corpora"] = {str(vid): d.corpus for vid, d in self.domains.items()}
            for vid, table in self.tree.branches.items():
                plot.persist(table, directory / "branches" / f"{vid}.plt")
            for rec in self.registry.instances.values():
                save_adapter_set(self.store.get(rec.task_id), directory / "adapters" / f"{rec.task_id}.adp")
            path = directory / "state.json"
            path.write_text(json.dumps(snap))
        return path

    @classmethod
    def load_state(cls, directory, model: Model, root: plot.PlotTable,
                   config: SchedulerConfig = SchedulerConfig(), min_corpus_tokens: int = 10_000) -> "HMIServer":
        directory = Path(directory)
        snap = json.loads((directory / "state.json").read_text())
        server = cls(model, root, config, min_corpus_tokens)
        for v in snap["versions"][1:]:
            server.tree.add_branch(plot.load(directory / "branches" / f"{v['version_id']}.plt"))
        for d in snap["domains"]:
            server.domains[d["version_id"]] = DomainRecord(**d, corpus=snap["corpora"][str(d["version_id"])])
        for r in snap["instances"]:
            rec = InstanceRecord(**r)
            aset = load_adapter_set(directory / "adapters" / f"{rec.task_id}.adp")
            server.store.register(aset)
            server.heads[rec.instance_id] = random_head(np.random.default_rng(rec.head_seed), rec.instance_id,
                                                        rec.head_kind, model.config.hidden_size, rec.labels)
            server.registry.add(rec)
        server._instance_ids = itertools.count(snap.get("next_instance_number", len(snap["instances"]) + 1))
        return server


# -- HTTP ------------------------------------------------------------------

_STATUS = [
    (RoutingError, HTTPStatus.NOT_FOUND),
    (NotFoundError, HTTPStatus.NOT_FOUND),
    (ConflictError, HTTPStatus.CONFLICT),
    (ValidationError, HTTPStatus.BAD_REQUEST),
    (HMIError, HTTPStatus.UNPROCESSABLE_ENTITY),
]


def _status_for(exc: Exception) -> HTTPStatus:
    for cls, status in _STATUS:
        if isinstance(exc, cls):
            return status
    return HTTPStatus.INTERNAL_SERVER_ERROR


def make_handler(hmi: HMIServer, infer_timeout: float = 60.0):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s - " + fmt, self.address_string(), *args)

        def _send(self, status: int, payload: Any) -> None:
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            try:
                data = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError as exc:
                raise ValidationError(f"malformed JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ValidationError("request body must be a JSON object")
            return data

        def do_GET(self):
            if self.path.rstrip("/") == "/state":
                self._send(HTTPStatus.OK, hmi.snapshot_state())
            else:
                self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})

        def do_POST(self):
            try:
                if self.path == "/infer":
                    self._send(HTTPStatus.OK, hmi.handle_infer(self._body(), infer_timeout).to_json())
                elif self.path == "/manage":
                    self._send(HTTPStatus.OK, hmi.handle_manage(self._body()))
                else:
                    self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})
            except Exception as exc:
                status = _status_for(exc)
                if status == HTTPStatus.INTERNAL_SERVER_ERROR:
                    log.exception("request failed")
                self._send(status, {"error": str(exc), "type": type(exc).__name__})

    return Handler


def make_http_server(hmi: HMIServer, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    httpd = ThreadingHTTPServer((host, port), make_handler(hmi))
    httpd.daemon_threads = True
    return httpd
