"""Versioned precomputed lookup tables (PLOT).

A root table maps every k-gram (k = 1..n) seen in a general corpus, plus every
vocabulary uni-gram, to its lower-stack representation.  Domain branches hold
only the most frequent n-grams of a domain corpus, computed with a domain
model; lookups consult the branch first and fall back to the root.
"""

from __future__ import annotations

import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import BuildError, FormatError, NotFoundError
from .transformer import Model, lower_stack_forward_many

Key = tuple[int, ...]

ROOT_VERSION = 0
NO_PARENT = -1
NOT_A_BRANCH = -1  # stored alpha for the root table


@dataclass
class PlotEntry:
    rep: np.ndarray  # len(key) x d, float32-representable
    freq: int = 1


@dataclass
class PlotTable:
    version_id: int
    n: int
    d: int
    entries: dict[Key, PlotEntry] = field(default_factory=dict)
    parent_id: Optional[int] = None
    domain_label: str = "root"
    alpha_percent: Optional[float] = None

    @property
    def is_root(self) -> bool:
        return self.parent_id is None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.entries

    def get(self, key) -> Optional[PlotEntry]:
        return self.entries.get(tuple(key))


def _f32(rep: np.ndarray) -> np.ndarray:
    return np.asarray(rep, dtype=np.float32).astype(np.float64)


def count_ngrams(corpus: Iterable[Sequence[int]], k: int) -> Counter:
    counts: Counter = Counter()
    for seq in corpus:
        seq = tuple(int(t) for t in seq)
        for i in range(len(seq) - k + 1):
            counts[seq[i:i + k]] += 1
    return counts


def _compute_reps(keys: Sequence[Key], model: Model, batch: int = 4096) -> dict[Key, np.ndarray]:
    by_len: dict[int, list[Key]] = {}
    for key in keys:
        by_len.setdefault(len(key), []).append(key)
    out = {}
    for group in by_len.values():
        for start in range(0, len(group), batch):
            chunk = group[start:start + batch]
            reps = lower_stack_forward_many(chunk, model)
            for key, rep in zip(chunk, reps):
                out[key] = _f32(rep)
    return out


def build_root(corpus: Sequence[Sequence[int]], model: Model, n: Optional[int] = None) -> PlotTable:
    """Materialize every k-gram (k <= n) of ``corpus`` plus all vocabulary uni-grams."""
    cfg = model.config
    n = cfg.max_fragment if n is None else n
    if n > cfg.max_fragment:
        raise BuildError(f"n={n} exceeds the model's position range {cfg.max_fragment}")
    corpus = [list(seq) for seq in corpus]
    if not corpus or not any(corpus):
        raise BuildError("empty corpus")
    counts: Counter = Counter()
    for k in range(1, n + 1):
        counts.update(count_ngrams(corpus, k))
    for tok in range(cfg.vocab_size):
        counts.setdefault((tok,), 1)
    reps = _compute_reps(list(counts), model)
    entries = {key: PlotEntry(reps[key], counts[key]) for key in counts}
    return PlotTable(ROOT_VERSION, n, cfg.hidden_size, entries)


def select_by_coverage(counts: Mapping[Key, int], alpha_percent: float) -> list[Key]:
    """Most frequent keys whose cumulative occurrence share first reaches alpha%.

    Ties in count are broken by lexicographic key order.
    """
    if not 0 <= alpha_percent <= 100:
        raise ValueError(f"alpha_percent must be in [0, 100], got {alpha_percent}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(counts.values())
    # integer comparison on alpha in hundredths of a percent avoids float drift
    target = round(alpha_percent * 100)
    chosen, cum = [], 0
    for key, c in ranked:
        if cum * 10000 >= target * total:
            break
        chosen.append(key)
        cum += c
    return chosen


def derive_branch(root: PlotTable, domain_corpus: Sequence[Sequence[int]], domain_model: Model,
                  alpha_percent: float, version_id: int = 1, domain_label: str = "domain",
                  parent_id: Optional[int] = None) -> PlotTable:
    counts = count_ngrams(domain_corpus, root.n)
    keys = select_by_coverage(counts, alpha_percent)
    reps = _compute_reps(keys, domain_model)
    entries = {key: PlotEntry(reps[key], counts[key]) for key in keys}
    return PlotTable(version_id, root.n, root.d, entries,
                     parent_id=root.version_id if parent_id is None else parent_id,
                     domain_label=domain_label, alpha_percent=float(alpha_percent))


class VersionTree:
    """Root table, domain branches, and the instance → (version, task) map.

    Writers are serialized by an internal lock; readers see whole tables only
    (a branch becomes visible atomically once registered).
    """

    def __init__(self, root: PlotTable):
        if not root.is_root:
            raise ValueError("root table must not have a parent")
        self.root = root
        self.branches: dict[int, PlotTable] = {}
        self.instances: dict[str, tuple[int, str]] = {}
        self._lock = threading.Lock()

    def next_version_id(self) -> int:
        with self._lock:
            return max([self.root.version_id, *self.branches]) + 1

    def add_branch(self, table: PlotTable) -> int:
        with self._lock:
            if table.version_id == self.root.version_id or table.version_id in self.branches:
                raise ValueError(f"version {table.version_id} already exists")
            if table.parent_id != self.root.version_id and table.parent_id not in self.branches:
                raise NotFoundError(f"parent version {table.parent_id} does not exist")
            branches = dict(self.branches)
            branches[table.version_id] = table
            self.branches = branches
        return table.version_id

    def has_version(self, version_id: int) -> bool:
        return version_id == self.root.version_id or version_id in self.branches

    def table(self, version_id: int) -> PlotTable:
        if version_id == self.root.version_id:
            return self.root
        try:
            return self.branches[version_id]
        except KeyError:
            raise NotFoundError(f"unknown version {version_id}") from None

    def lineage(self, version_id: int) -> list[int]:
        chain = [version_id]
        table = self.table(version_id)
        while table.parent_id is not None:
            chain.append(table.parent_id)
            table = self.table(table.parent_id)
        return chain


def lookup(tree: VersionTree, version_id: int, key: Sequence[int]) -> tuple[PlotEntry, str]:
    """Branch entry if present, else root entry; returns ``(entry, "branch" | "root")``."""
    key = tuple(int(t) for t in key)
    table = tree.table(version_id)
    if not table.is_root:
        hit = table.entries.get(key)
        if hit is not None:
            return hit, "branch"
    hit = tree.root.entries.get(key)
    if hit is not None:
        return hit, "root"
    raise NotFoundError(f"fragment {key} not in version {version_id} or root")


def _try(tree: VersionTree, version_id: int, key: Key) -> Optional[PlotEntry]:
    try:
        return lookup(tree, version_id, key)[0]
    except NotFoundError:
        return None


def _resolve_window(tree: VersionTree, version_id: int, tokens: Key) -> tuple[np.ndarray, list[int]]:
    m = len(tokens)
    entry = _try(tree, version_id, tokens)
    if entry is not None:
        return entry.rep, [m] * m
    rows: list[Optional[np.ndarray]] = [None] * m
    levels = [0] * m
    for k in range(m - 1, 0, -1):
        for start in range(m - k + 1):
            covers = [i for i in range(start, start + k) if rows[i] is None]
            if not covers:
                continue
            entry = _try(tree, version_id, tokens[start:start + k])
            if entry is None:
                continue
            for i in covers:
                rows[i] = entry.rep[i - start]
                levels[i] = k
        if all(r is not None for r in rows):
            break
    missing = [tokens[i] for i, r in enumerate(rows) if r is None]
    if missing:
        raise NotFoundError(f"no uni-gram backstop for tokens {missing}")
    return np.stack(rows), levels


def fallback_retrieve(tree: VersionTree, version_id: int, tokens: Sequence[int]) -> tuple[np.ndarray, list[int]]:
    """Per-position reps for an n-token window plus the gram length that served each position.

    The whole n-gram wins when it resolves; otherwise each position takes the
    longest resolvable sub-gram covering it, leftmost first.
    """
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) != tree.root.n:
        raise ValueError(f"expected exactly {tree.root.n} tokens, got {len(tokens)}")
    return _resolve_window(tree, version_id, tokens)


def window_bounds(center: int, length: int, n: int) -> tuple[int, int]:
    """Half-open token range of the size-n window centred on ``center``, clipped to the sequence."""
    left = (n - 1) // 2
    return max(0, center - left), min(length, center - left + n)


def retrieve_sequence(tree: VersionTree, version_id: int, tokens: Sequence[int],
                      mode: str = "encoder") -> np.ndarray:
    """Approximate lower-stack output for a full input sequence.

    Encoder mode averages each token's rows over every window that contains
    it.  Causal mode reads position i from the window ending at i.
    """
    tokens = tuple(int(t) for t in tokens)
    length = len(tokens)
    if length < 1:
        raise ValueError("empty token sequence")
    n, d = tree.root.n, tree.root.d
    if mode == "causal":
        out = np.empty((length, d))
        for i in range(length):
            rep, _ = _resolve_window(tree, version_id, tokens[max(0, i - n + 1): i + 1])
            out[i] = rep[-1]
        return out
    sums = np.zeros((length, d))
    counts = np.zeros(length)
    for c in range(length):
        lo, hi = window_bounds(c, length, n)
        rep, _ = _resolve_window(tree, version_id, tokens[lo:hi])
        sums[lo:hi] += rep
        counts[lo:hi] += 1
    return sums / counts[:, None]


# -- PLT1 file format ------------------------------------------------------

PLOT_MAGIC = b"PLT1"


def persist(table: PlotTable, path) -> None:
    label = table.domain_label.encode("utf-8")
    alpha = NOT_A_BRANCH if table.alpha_percent is None else round(table.alpha_percent * 100)
    parent = NO_PARENT if table.parent_id is None else table.parent_id
    parts = [PLOT_MAGIC, struct.pack("<iiI", table.version_id, parent, len(label)), label,
             struct.pack("<IIIi", table.n, table.d, len(table.entries), alpha)]
    for key in sorted(table.entries):
        entry = table.entries[key]
        if entry.rep.shape != (len(key), table.d):
            raise ValueError(f"entry {key} has rep shape {entry.rep.shape}")
        parts.append(struct.pack(f"<I{len(key)}IQ", len(key), *key, entry.freq))
        parts.append(np.ascontiguousarray(entry.rep, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"truncated {what}", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise FormatError(f"truncated {what}", self.pos)
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out


def load(path) -> PlotTable:
    r = _Reader(Path(path).read_bytes())
    if r.raw(4, "magic") != PLOT_MAGIC:
        raise FormatError("bad PLOT magic", 0)
    version_id, parent, label_len = r.take("<iiI", "header")
    label_at = r.pos
    try:
        label = r.raw(label_len, "domain label").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("domain label is not UTF-8", label_at) from None
    n, d, count, alpha = r.take("<IIIi", "header")
    entries: dict[Key, PlotEntry] = {}
    for _ in range(count):
        at = r.pos
        (klen,) = r.take("<I", "entry")
        if not 1 <= klen <= n:
            raise FormatError(f"key length {klen} outside 1..{n}", at)
        key = r.take(f"<{klen}I", "key")
        (freq,) = r.take("<Q", "frequency")
        blob = r.raw(4 * klen * d, "representation")
        rep = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(klen, d)
        entries[tuple(key)] = PlotEntry(rep, int(freq))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last entry", r.pos)
    return PlotTable(version_id, n, d, entries,
                     parent_id=None if parent == NO_PARENT else parent,
                     domain_label=label,
                     alpha_percent=None if alpha == NOT_A_BRANCH else alpha / 100)
