"""Shared transformer backbone: lower stack (PLOT builder) and higher stack (serving).

Layers are post-norm (BERT ordering).  An adapter, when present, transforms
the attention sublayer output before its residual layer norm; the FFN
sublayer is untouched.  All forward functions are pure.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor
from .errors import ConfigurationError, DimensionError, FormatError, VocabularyError

MODES = ("encoder", "causal")
HEAD_KINDS = ("cls_classify", "token_tag", "lm_logits")
INIT_SCALE = 0.05


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 32
    heads: int = 4
    lower_layers: int = 6
    higher_layers: int = 6
    ffn_size: int = 64
    vocab_size: int = 1024
    mode: str = "encoder"
    max_fragment: int = 3
    adapter_bottleneck: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size % self.heads:
            raise ConfigurationError("hidden_size must be divisible by heads")
        if self.lower_layers < 1 or self.higher_layers < 1:
            raise ConfigurationError("need at least one lower and one higher layer")
        if self.max_fragment not in (1, 2, 3, 5):
            raise ConfigurationError(f"max_fragment must be one of 1, 2, 3, 5; got {self.max_fragment}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if not 0 < self.adapter_bottleneck < self.hidden_size:
            raise ConfigurationError("adapter bottleneck must satisfy 0 < r < hidden_size")

    @property
    def causal(self) -> bool:
        return self.mode == "causal"


@dataclass
class LayerWeights:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_gain: np.ndarray
    ln1_shift: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_gain: np.ndarray
    ln2_shift: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def shapes(cls, d: int, ffn: int) -> list[tuple[int, ...]]:
        return [
            (d, d), (d,), (d, d), (d,), (d, d), (d,), (d, d), (d,),
            (d,), (d,),
            (d, ffn), (ffn,), (ffn, d), (d,),
            (d,), (d,),
        ]

    @property
    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class AdapterParams:
    """Bottleneck adapter for one higher layer: ``up(relu(down(a))) + a``."""

    layer_index: int
    w_down: np.ndarray  # d x r
    b_down: np.ndarray  # r
    w_up: np.ndarray  # r x d
    b_up: np.ndarray  # d

    def __post_init__(self):
        d, r = self.w_down.shape
        if self.b_down.shape != (r,) or self.w_up.shape != (r, d) or self.b_up.shape != (d,):
            raise DimensionError("adapter parameter shapes do not conform")
        if r >= d:
            raise DimensionError(f"adapter bottleneck {r} must be smaller than hidden size {d}")

    @property
    def hidden_size(self) -> int:
        return self.w_down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.w_down.size + self.b_down.size + self.w_up.size + self.b_up.size

    @classmethod
    def zeros(cls, layer_index: int, d: int, r: int) -> "AdapterParams":
        return cls(layer_index, np.zeros((d, r)), np.zeros(r), np.zeros((r, d)), np.zeros(d))


@dataclass
class OutputHead:
    task_id: str
    kind: str
    w: np.ndarray  # d x labels
    b: np.ndarray  # labels

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown head kind {self.kind!r}")
        if self.w.ndim != 2 or self.w.shape[1] < 1 or self.b.shape != (self.w.shape[1],):
            raise DimensionError("output head shapes do not conform")

    @property
    def labels(self) -> int:
        return self.w.shape[1]


@dataclass
class Model:
    config: ModelConfig
    token_embedding: np.ndarray  # vocab x d
    position_embedding: np.ndarray  # max_fragment x d
    lower: list[LayerWeights] = field(default_factory=list)
    higher: list[LayerWeights] = field(default_factory=list)

    @property
    def parameter_count(self) -> int:
        n = self.token_embedding.size + self.position_embedding.size
        return n + sum(layer.parameter_count for layer in self.lower + self.higher)

    def with_lower_reseeded(self, seed: int) -> "Model":
        """Same higher stack, freshly seeded embeddings and lower layers.

        Stands in for a further-pretrained domain model: only the lower half
        changes, the shared higher layers are reused as-is.
        """
        fresh = generate_model(replace(self.config, seed=seed))
        return Model(self.config, fresh.token_embedding, fresh.position_embedding, fresh.lower, self.higher)


def _uniform(rng: np.random.Generator, shape, scale: float = INIT_SCALE, center: float = 0.0) -> np.ndarray:
    # float32-representable values so that artifact files round-trip exactly
    values = center + rng.uniform(-scale, scale, size=shape)
    return values.astype(np.float32).astype(np.float64)


def _random_layer(rng: np.random.Generator, d: int, ffn: int) -> LayerWeights:
    arrays = []
    for i, shape in enumerate(LayerWeights.shapes(d, ffn)):
        gain = i in (8, 14)
        arrays.append(_uniform(rng, shape, center=1.0 if gain else 0.0))
    return LayerWeights(*arrays)


def generate_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    d = config.hidden_size
    tok = _uniform(rng, (config.vocab_size, d))
    pos = _uniform(rng, (config.max_fragment, d))
    lower = [_random_layer(rng, d, config.ffn_size) for _ in range(config.lower_layers)]
    higher = [_random_layer(rng, d, config.ffn_size) for _ in range(config.higher_layers)]
    return Model(config, tok, pos, lower, higher)


def random_adapter(rng: np.random.Generator, layer_index: int, d: int, r: int,
                   scale: float = INIT_SCALE) -> AdapterParams:
    return AdapterParams(
        layer_index,
        _uniform(rng, (d, r), scale),
        _uniform(rng, (r,), scale),
        _uniform(rng, (r, d), scale),
        _uniform(rng, (d,), scale),
    )


def random_head(rng: np.random.Generator, task_id: str, kind: str, d: int, labels: int) -> OutputHead:
    return OutputHead(task_id, kind, _uniform(rng, (d, labels)), _uniform(rng, (labels,)))


# -- forward computation ---------------------------------------------------

def adapter_apply(a, p: AdapterParams) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != p.hidden_size:
        raise DimensionError(f"adapter for d={p.hidden_size} applied to {a.shape[-1]} columns")
    z = tensor.relu(tensor.linear(a, p.w_down, p.b_down))
    return tensor.linear(z, p.w_up, p.b_up) + a


def _attention(h: np.ndarray, w: LayerWeights, heads: int, causal: bool,
               key_mask: Optional[np.ndarray] = None) -> np.ndarray:
    *lead, n, d = h.shape
    dh = d // heads

    def split(x):
        return x.reshape(*lead, n, heads, dh).swapaxes(-2, -3)

    q = split(tensor.linear(h, w.wq, w.bq))
    k = split(tensor.linear(h, w.wk, w.bk))
    v = split(tensor.linear(h, w.wv, w.bv))
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(dh)
    allowed = None
    if causal:
        allowed = np.tril(np.ones((n, n), dtype=bool))
    if key_mask is not None:
        # key_mask: (..., n) True for real tokens
        km = key_mask[..., None, None, :]
        allowed = km if allowed is None else (allowed & km)
    if allowed is not None:
        scores = np.where(allowed, scores, -np.inf)
    probs = tensor.softmax_rows(scores)
    ctx = (probs @ v).swapaxes(-2, -3).reshape(*lead, n, d)
    return tensor.linear(ctx, w.wo, w.bo)


def attention(h, w: LayerWeights, mode: str = "encoder", heads: int = 4) -> np.ndarray:
    h = tensor.as_matrix(h, "h")
    if h.shape[1] != w.wq.shape[0]:
        raise DimensionError(f"hidden states have {h.shape[1]} columns, weights expect {w.wq.shape[0]}")
    return _attention(h, w, heads, mode == "causal")


def _layer(h: np.ndarray, w: LayerWeights, heads: int, causal: bool,
           adapter_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
           key_mask: Optional[np.ndarray] = None) -> np.ndarray:
    a = _attention(h, w, heads, causal, key_mask)
    if adapter_fn is not None:
        a = adapter_fn(a)
    h1 = tensor.layer_norm(h + a, w.ln1_gain, w.ln1_shift)
    f = tensor.linear(tensor.relu(tensor.linear(h1, w.w1, w.b1)), w.w2, w.b2)
    return tensor.layer_norm(h1 + f, w.ln2_gain, w.ln2_shift)


def layer_forward(h, w: LayerWeights, adapter: Optional[AdapterParams] = None,
                  mode: str = "encoder", heads: int = 4) -> np.ndarray:
    h = tensor.as_matrix(h, "h")
    if h.shape[1] != w.wq.shape[0]:
        raise DimensionError(f"hidden states have {h.shape[1]} columns, weights expect {w.wq.shape[0]}")
    fn = None if adapter is None else (lambda a: adapter_apply(a, adapter))
    return _layer(h, w, heads, mode == "causal", fn)


def layer_forward_batch(hb: np.ndarray, w: LayerWeights, heads: int, causal: bool,
                        adapter_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                        lengths: Optional[Sequence[int]] = None) -> np.ndarray:
    """One layer over a padded ``(batch, n, d)`` stack.

    ``lengths`` masks padded key positions so real tokens never attend to
    padding; rows past each length are garbage and must be discarded.
    """
    key_mask = None
    if lengths is not None:
        n = hb.shape[1]
        key_mask = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
        if key_mask.all():
            key_mask = None
    return _layer(hb, w, heads, causal, adapter_fn, key_mask)


def embed(tokens: Sequence[int], model: Model) -> np.ndarray:
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or not 1 <= len(ids) <= cfg.max_fragment:
        raise DimensionError(f"fragment length must be in 1..{cfg.max_fragment}, got {len(ids)}")
    bad = (ids < 0) | (ids >= cfg.vocab_size)
    if bad.any():
        raise VocabularyError(f"token id {int(ids[bad][0])} outside vocabulary of {cfg.vocab_size}")
    return model.token_embedding[ids] + model.position_embedding[: len(ids)]


def lower_stack_forward(tokens: Sequence[int], model: Model) -> np.ndarray:
    """Lower-layer output for one fragment, positions numbered from 0."""
    h = embed(tokens, model)
    cfg = model.config
    for w in model.lower:
        h = _layer(h, w, cfg.heads, cfg.causal)
    return h


def lower_stack_forward_many(fragments: Sequence[Sequence[int]], model: Model) -> np.ndarray:
    """Stacked lower-stack pass over equal-length fragments; element i equals
    ``lower_stack_forward(fragments[i])`` bit-for-bit."""
    h = np.stack([embed(f, model) for f in fragments])
    cfg = model.config
    for w in model.lower:
        h = _layer(h, w, cfg.heads, cfg.causal)
    return h


def apply_head(h: np.ndarray, head: Optional[OutputHead]) -> np.ndarray:
    if head is None:
        raise ConfigurationError("no output head configured")
    if head.w.shape[0] != h.shape[-1]:
        raise DimensionError(f"head expects d={head.w.shape[0]}, got {h.shape[-1]}")
    if head.kind == "cls_classify":
        return tensor.linear(h[0], head.w, head.b)
    return tensor.linear(h, head.w, head.b)


def higher_stack_forward(h, adapters: Sequence[Optional[AdapterParams]], head: Optional[OutputHead],
                         model: Model) -> np.ndarray:
    """Higher layers with adapters injected, then the task head.

    Returns a label-score vector for ``cls_classify`` (read at position 0) and
    a per-position score matrix for ``token_tag`` / ``lm_logits``.
    """
    cfg = model.config
    h = tensor.as_matrix(h, "h")
    if h.shape[1] != cfg.hidden_size:
        raise DimensionError(f"hidden states have {h.shape[1]} columns, model has d={cfg.hidden_size}")
    if head is None:
        raise ConfigurationError("no output head configured")
    adapters = list(adapters) if adapters is not None else []
    if len(adapters) > cfg.higher_layers:
        raise ConfigurationError(f"{len(adapters)} adapters for {cfg.higher_layers} higher layers")
    adapters += [None] * (cfg.higher_layers - len(adapters))
    for w, p in zip(model.higher, adapters):
        fn = None if p is None else (lambda a, p=p: adapter_apply(a, p))
        h = _layer(h, w, cfg.heads, cfg.causal, fn)
    return apply_head(h, head)


# -- artifact file ---------------------------------------------------------

MODEL_MAGIC = b"HMI1"
_CONFIG_INTS = ("hidden_size", "heads", "lower_layers", "higher_layers", "ffn_size",
                "vocab_size", "mode", "max_fragment", "adapter_bottleneck", "seed")


def _model_arrays(model: Model) -> list[np.ndarray]:
    out = [model.token_embedding, model.position_embedding]
    for layer in model.lower + model.higher:
        out.extend(layer.arrays())
    return out


def save_model(model: Model, path) -> None:
    cfg = model.config
    header = [MODES.index(cfg.mode) if name == "mode" else getattr(cfg, name) for name in _CONFIG_INTS]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack(f"<{len(header)}i", *header))
        for arr in _model_arrays(model):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError("bad model magic", 0)
    hsize = 4 * len(_CONFIG_INTS)
    if len(data) < 4 + hsize:
        raise FormatError("truncated model header", len(data))
    values = dict(zip(_CONFIG_INTS, struct.unpack_from(f"<{len(_CONFIG_INTS)}i", data, 4)))
    if not 0 <= values["mode"] < len(MODES):
        raise FormatError(f"unknown mode code {values['mode']}", 4 + 4 * _CONFIG_INTS.index("mode"))
    values["mode"] = MODES[values["mode"]]
    try:
        cfg = ModelConfig(**values)
    except ConfigurationError as exc:
        raise FormatError(f"invalid model header: {exc}", 4) from None
    d, ffn = cfg.hidden_size, cfg.ffn_size
    shapes = [(cfg.vocab_size, d), (cfg.max_fragment, d)]
    shapes += LayerWeights.shapes(d, ffn) * (cfg.lower_layers + cfg.higher_layers)
    offset = 4 + hsize
    arrays = []
    for shape in shapes:
        count = math.prod(shape)
        end = offset + 4 * count
        if end > len(data):
            raise FormatError("truncated model weights", offset)
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                      .astype(np.float64).reshape(shape))
        offset = end
    if offset != len(data):
        raise FormatError("trailing bytes after model weights", offset)
    per = len(LayerWeights.shapes(d, ffn))
    layers = [LayerWeights(*arrays[2 + i * per: 2 + (i + 1) * per])
              for i in range(cfg.lower_layers + cfg.higher_layers)]
    return Model(cfg, arrays[0], arrays[1], layers[: cfg.lower_layers], layers[cfg.lower_layers:])
