"""Deterministic toy decoder-only transformer.

Pre-norm RMS blocks with rotary position embeddings and a plain two-matrix
SiLU feed-forward. Built for reproducibility rather than speed: weights come
from a counter-based generator keyed per tensor, tensors cross function
boundaries as float32, and arithmetic inside a layer runs in float64 so the
same tokens give the same numbers regardless of how the sequence was sliced.
"""

from __future__ import annotations

import json
import hashlib
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ContractViolation, InputError, ShapeError

# float32 at every boundary (weights, hidden states, caches, logits),
# float64 inside a layer. Keeps cross-path comparisons tight.
DTYPE = np.float32
_F64 = np.float64

_NORM_EPS = 1e-6

# Per-tensor stream ids for the counter-based init generator. A layer's
# block starts at _LAYER_BASE + 6 * layer_index.
_STREAM_EMBED = 0
_STREAM_UNEMBED = 1
_LAYER_BASE = 2
_STREAMS_PER_LAYER = 6


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and seed of the toy model.

    d_model may be omitted (passed as 0); it is then derived as
    n_heads * head_dim, and must equal that product when given.
    """

    n_layers: int
    n_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    seed: int
    d_model: int = 0
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.d_model == 0:
            object.__setattr__(self, "d_model", self.n_heads * self.head_dim)
        object.__setattr__(self, "rope_base", float(self.rope_base))
        for name in ("n_layers", "n_heads", "head_dim", "d_ff", "vocab_size", "d_model"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model={self.d_model} != n_heads*head_dim={self.n_heads * self.head_dim}"
            )
        if not (self.rope_base > 1.0):
            raise ConfigError(f"rope_base must be > 1, got {self.rope_base}")
        if not isinstance(self.seed, int) or not (0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        required = allowed - {"d_model", "rope_base"}
        missing = required - set(data)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def fingerprint(self) -> bytes:
        """256-bit digest of the canonical config, seed included."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).digest()


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray


@dataclass
class ModelWeights:
    embedding: np.ndarray  # (vocab, d_model)
    layers: list[LayerWeights]
    final_gain: np.ndarray  # (d_model,)
    unembed: np.ndarray  # (d_model, vocab)


@dataclass
class Model:
    config: ModelConfig
    weights: ModelWeights


def _draw_uniform(seed: int, stream: int, shape: tuple[int, ...], scale: float) -> np.ndarray:
    # Counter-based generator keyed (seed, stream): per-tensor draws are
    # independent of the order tensors are created in.
    key = np.array([seed, stream], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.uniform(-scale, scale, size=shape).astype(DTYPE)


def init_model(config: ModelConfig) -> ModelWeights:
    """Draw all projection matrices uniform in [-1/sqrt(d_model), +1/sqrt(d_model)].

    Normalization gains start at 1 (a random gain would just rescale the
    stream). The result is a pure function of the config, seed included.
    """
    d = config.d_model
    scale = 1.0 / np.sqrt(d)
    embedding = _draw_uniform(config.seed, _STREAM_EMBED, (config.vocab_size, d), scale)
    unembed = _draw_uniform(config.seed, _STREAM_UNEMBED, (d, config.vocab_size), scale)
    layers = []
    for l in range(config.n_layers):
        base = _LAYER_BASE + _STREAMS_PER_LAYER * l
        layers.append(
            LayerWeights(
                wq=_draw_uniform(config.seed, base + 0, (d, d), scale),
                wk=_draw_uniform(config.seed, base + 1, (d, d), scale),
                wv=_draw_uniform(config.seed, base + 2, (d, d), scale),
                wo=_draw_uniform(config.seed, base + 3, (d, d), scale),
                w_in=_draw_uniform(config.seed, base + 4, (d, config.d_ff), scale),
                w_out=_draw_uniform(config.seed, base + 5, (config.d_ff, d), scale),
                attn_gain=np.ones(d, dtype=DTYPE),
                ffn_gain=np.ones(d, dtype=DTYPE),
            )
        )
    final_gain = np.ones(d, dtype=DTYPE)
    return ModelWeights(embedding=embedding, layers=layers, final_gain=final_gain, unembed=unembed)


def build_model(config: ModelConfig) -> Model:
    return Model(config=config, weights=init_model(config))


# ---------------------------------------------------------------------------
# Rotary position embedding


def rope_rotate(vectors: np.ndarray, positions, config: ModelConfig) -> np.ndarray:
    """Rotate consecutive coordinate pairs (x_2i, x_2i+1) by angle m * theta_i.

    theta_i = rope_base ** (-2i / head_dim). `vectors` has head_dim as its
    last axis; `positions` broadcasts against the second-to-last axis (a
    scalar is accepted for a single vector). Returns float64.
    """
    v = np.asarray(vectors, dtype=_F64)
    if v.shape[-1] != config.head_dim:
        raise ShapeError(f"last axis {v.shape[-1]} != head_dim {config.head_dim}")
    pos = np.asarray(positions, dtype=_F64)
    if np.any(pos < 0):
        raise InputError("positions must be >= 0")
    single = v.ndim == 1
    if single:
        v = v[None, :]
        pos = np.atleast_1d(pos)
    half = config.head_dim // 2
    i = np.arange(half, dtype=_F64)
    theta = np.asarray(config.rope_base, dtype=_F64) ** (-2.0 * i / config.head_dim)
    angles = pos[..., None] * theta  # (..., n, half)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Attention


def attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    q_positions: np.ndarray,
    k_positions: np.ndarray,
    *,
    scale: float | None = None,
    block: int = 512,
) -> np.ndarray:
    """Causal scaled dot-product attention.

    Shapes (n_heads, rows, head_dim); the causal mask admits key position
    <= query position. Query rows are processed in blocks so the score
    matrix never materializes at full n x n. Returns float64.
    """
    q = np.asarray(queries, dtype=_F64)
    k = np.asarray(keys, dtype=_F64)
    v = np.asarray(values, dtype=_F64)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("queries/keys/values must be (n_heads, rows, head_dim)")
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise ShapeError(f"head counts differ: {q.shape[0]}, {k.shape[0]}, {v.shape[0]}")
    if k.shape[1] != v.shape[1] or k.shape[2] != q.shape[2] or v.shape[2] != q.shape[2]:
        raise ShapeError("keys/values misaligned with queries")
    qpos = np.asarray(q_positions, dtype=np.int64)
    kpos = np.asarray(k_positions, dtype=np.int64)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[2])
    n_q = q.shape[1]
    out = np.empty_like(q)
    for start in range(0, n_q, block):
        stop = min(start + block, n_q)
        scores = np.matmul(q[:, start:stop], k.transpose(0, 2, 1)) * scale
        hidden_mask = kpos[None, :] > qpos[start:stop, None]
        if hidden_mask.all(axis=1).any():
            raise ContractViolation("a query row has no visible key")
        scores = np.where(hidden_mask[None, :, :], -np.inf, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        out[:, start:stop] = np.matmul(weights, v)
    return out


def attention_weights(
    queries: np.ndarray,
    keys: np.ndarray,
    q_positions: np.ndarray,
    k_positions: np.ndarray,
    *,
    scale: float | None = None,
) -> np.ndarray:
    """Causal softmax weight matrices (n_heads, rows, keys), float64.

    Same masking and scaling as `attention`, returning the weights instead
    of their product with the values. Used by relevance scoring, eviction
    scoring, and the attention-map loss metric.
    """
    q = np.asarray(queries, dtype=_F64)
    k = np.asarray(keys, dtype=_F64)
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"head counts differ: {q.shape[0]} vs {k.shape[0]}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[2])
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    hidden = np.asarray(k_positions)[None, :] > np.asarray(q_positions)[:, None]
    if hidden.all(axis=1).any():
        raise ContractViolation("a query row has no visible key")
    scores = np.where(hidden[None, :, :], -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights


# ---------------------------------------------------------------------------
# Layers


@dataclass
class HiddenStates:
    x: np.ndarray  # (n, d_model) float32
    positions: np.ndarray  # (n,) int64


@dataclass
class LayerKV:
    keys: np.ndarray  # (n_heads, n, head_dim) float32
    values: np.ndarray  # (n_heads, n, head_dim) float32
    rope_applied: bool
    positions: np.ndarray  # (n,) int64; meaningful only when rope_applied

    @property
    def length(self) -> int:
        return self.keys.shape[1]


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + _NORM_EPS) * np.asarray(gain, dtype=_F64)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _split_heads(x: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    # (n, d_model) -> (n_heads, n, head_dim)
    return x.reshape(x.shape[0], n_heads, head_dim).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # (n_heads, n, head_dim) -> (n, d_model)
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


@dataclass
class _LayerStep:
    """Float64 intermediates of one layer applied to a row block."""

    out: np.ndarray  # (n, d_model) next hidden states
    q_rot: np.ndarray  # (H, n, hd) rotated queries
    k_rot: np.ndarray  # (H, n, hd) rotated keys
    k_raw: np.ndarray  # (H, n, hd) pre-rotation keys
    v: np.ndarray  # (H, n, hd) values


def _layer_step(
    model: Model,
    layer: int,
    x64: np.ndarray,
    positions: np.ndarray,
    cache_k64: np.ndarray | None,
    cache_v64: np.ndarray | None,
    cache_pos: np.ndarray | None,
) -> _LayerStep:
    """One pre-norm block over the given rows.

    Residual stream: t = x + Wo(attn(norm1(x))); out = t + FFN(norm2(t)).
    cache_k64, when present, is prepended to this block's own keys/values
    for the attention so a suffix can run against cached context.
    """
    cfg, lw = model.config, model.weights.layers[layer]
    h1 = _rmsnorm(x64, lw.attn_gain)
    q = _split_heads(h1 @ np.asarray(lw.wq, dtype=_F64), cfg.n_heads, cfg.head_dim)
    k_raw = _split_heads(h1 @ np.asarray(lw.wk, dtype=_F64), cfg.n_heads, cfg.head_dim)
    v = _split_heads(h1 @ np.asarray(lw.wv, dtype=_F64), cfg.n_heads, cfg.head_dim)
    q_rot = rope_rotate(q, positions, cfg)
    k_rot = rope_rotate(k_raw, positions, cfg)
    if cache_k64 is not None and cache_k64.shape[1] > 0:
        full_k = np.concatenate([cache_k64, k_rot], axis=1)
        full_v = np.concatenate([cache_v64, v], axis=1)
        full_pos = np.concatenate([cache_pos, positions])
    else:
        full_k, full_v, full_pos = k_rot, v, positions
    attn = attention(q_rot, full_k, full_v, positions, full_pos)
    t = x64 + _merge_heads(attn) @ np.asarray(lw.wo, dtype=_F64)
    out = t + _silu(_rmsnorm(t, lw.ffn_gain) @ np.asarray(lw.w_in, dtype=_F64)) @ np.asarray(
        lw.w_out, dtype=_F64
    )
    return _LayerStep(out=out, q_rot=q_rot, k_rot=k_rot, k_raw=k_raw, v=v)


def layer_forward(
    model: Model, hidden: HiddenStates, layer: int, cache_view: LayerKV | None = None
) -> tuple[HiddenStates, LayerKV]:
    """Run one layer over new rows, optionally on top of cached context.

    Returns the next hidden states for exactly the input rows and the new
    rows' keys/values (keys rotated at their absolute positions). The cache
    view is read-only here.
    """
    cfg = model.config
    pos = np.asarray(hidden.positions, dtype=np.int64)
    n = pos.shape[0]
    if n == 0:
        empty = np.zeros((cfg.n_heads, 0, cfg.head_dim), dtype=DTYPE)
        return (
            HiddenStates(x=np.zeros((0, cfg.d_model), dtype=DTYPE), positions=pos),
            LayerKV(keys=empty, values=empty.copy(), rope_applied=True, positions=pos),
        )
    if n > 1 and np.any(np.diff(pos) <= 0):
        raise ContractViolation("hidden positions must be strictly increasing")
    cache_k = cache_v = cache_pos = None
    if cache_view is not None and cache_view.length > 0:
        if not cache_view.rope_applied:
            raise ContractViolation("cache_view must carry rotated keys")
        if cache_view.positions.max() >= pos.min():
            raise ContractViolation("cache positions overlap the new rows")
        cache_k = np.asarray(cache_view.keys, dtype=_F64)
        cache_v = np.asarray(cache_view.values, dtype=_F64)
        cache_pos = np.asarray(cache_view.positions, dtype=np.int64)
    step = _layer_step(model, layer, np.asarray(hidden.x, dtype=_F64), pos, cache_k, cache_v, cache_pos)
    new_kv = LayerKV(
        keys=step.k_rot.astype(DTYPE),
        values=step.v.astype(DTYPE),
        rope_applied=True,
        positions=pos.copy(),
    )
    return HiddenStates(x=step.out.astype(DTYPE), positions=pos.copy()), new_kv


# ---------------------------------------------------------------------------
# Prefill


@dataclass
class PrefillResult:
    caches: list[LayerKV]  # rotated keys, positions 0..n-1
    logits: np.ndarray  # (vocab,) float32, last row
    raw_keys: list[np.ndarray] | None = None  # per layer (H, n, hd) float32, pre-rotation
    queries: list[np.ndarray] | None = None  # per layer (H, n, hd) float32, rotated
    all_logits: np.ndarray | None = None  # (n, vocab) float32


def _check_tokens(config: ModelConfig, token_ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise InputError("token_ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(
            f"token id out of vocabulary [0, {config.vocab_size}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    return ids


def prefill_forward(
    model: Model,
    token_ids,
    *,
    record_raw_keys: bool = False,
    record_queries: bool = False,
    want_all_logits: bool = False,
) -> PrefillResult:
    """Full forward over a token sequence at positions 0..n-1."""
    cfg = model.config
    ids = _check_tokens(cfg, token_ids)
    n = ids.shape[0]
    pos = np.arange(n, dtype=np.int64)
    x64 = np.asarray(model.weights.embedding[ids], dtype=_F64)
    caches: list[LayerKV] = []
    raw_keys: list[np.ndarray] = []
    queries: list[np.ndarray] = []
    for l in range(cfg.n_layers):
        step = _layer_step(model, l, x64, pos, None, None, None)
        caches.append(
            LayerKV(
                keys=step.k_rot.astype(DTYPE),
                values=step.v.astype(DTYPE),
                rope_applied=True,
                positions=pos.copy(),
            )
        )
        if record_raw_keys:
            raw_keys.append(step.k_raw.astype(DTYPE))
        if record_queries:
            queries.append(step.q_rot.astype(DTYPE))
        # float32 boundary between layers: both the vanilla path and the
        # fused path see identical layer inputs.
        x64 = np.asarray(step.out.astype(DTYPE), dtype=_F64)
    final = _rmsnorm(x64, model.weights.final_gain) @ np.asarray(model.weights.unembed, dtype=_F64)
    result = PrefillResult(caches=caches, logits=final[-1].astype(DTYPE))
    if record_raw_keys:
        result.raw_keys = raw_keys
    if record_queries:
        result.queries = queries
    if want_all_logits:
        result.all_logits = final.astype(DTYPE)
    return result


def full_prefill(model: Model, token_ids) -> tuple[list[LayerKV], np.ndarray]:
    """No-reuse oracle: process the whole prompt, return caches and last-row logits."""
    res = prefill_forward(model, token_ids)
    return res.caches, res.logits


# ---------------------------------------------------------------------------
# Decode


class DecodeCache:
    """Growable per-layer KV storage for autoregressive decoding.

    Rows are dense (n_heads, count, head_dim) slices of a preallocated
    buffer that doubles on demand. All stored rows precede the current
    decode position, so attention over the cache needs no mask. Layer
    count, head count, and head_dim come from the array shapes.
    """

    def __init__(self, keys: np.ndarray, values: np.ndarray, length: int):
        # keys/values: (L, H, capacity, hd) float32 with `length` valid rows.
        self._keys = keys
        self._values = values
        self._count = length
        self._max_pos = length - 1

    @classmethod
    def from_layer_kvs(cls, config: ModelConfig, caches: list[LayerKV]) -> "DecodeCache":
        if len(caches) != config.n_layers:
            raise ShapeError(f"expected {config.n_layers} layers, got {len(caches)}")
        n = caches[0].length
        for c in caches:
            if not c.rope_applied:
                raise ContractViolation("decode requires rotated caches")
            if c.length != n:
                raise ShapeError("layers disagree on cache length")
        keys = np.stack([c.keys for c in caches]).copy()
        values = np.stack([c.values for c in caches]).copy()
        return cls(keys, values, n)

    @classmethod
    def from_arrays(cls, keys: np.ndarray, values: np.ndarray) -> "DecodeCache":
        # keys/values: (L, H, n, hd) float32, already rotated.
        return cls(keys.copy(), values.copy(), keys.shape[2])

    @property
    def length(self) -> int:
        return self._count

    @property
    def max_position(self) -> int:
        return self._max_pos

    def keys_view(self, layer: int) -> np.ndarray:
        return self._keys[layer, :, : self._count]

    def values_view(self, layer: int) -> np.ndarray:
        return self._values[layer, :, : self._count]

    def _grow(self) -> None:
        cap = self._keys.shape[2]
        new_cap = max(2 * cap, 8)
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            grown = np.zeros(old.shape[:2] + (new_cap,) + old.shape[3:], dtype=old.dtype)
            grown[:, :, :cap] = old
            setattr(self, name, grown)

    def append(self, layer: int, k_row: np.ndarray, v_row: np.ndarray, position: int) -> None:
        if position <= self._max_pos:
            raise ContractViolation(
                f"position {position} collides with cached maximum {self._max_pos}"
            )
        if self._count == self._keys.shape[2]:
            self._grow()
        self._keys[layer, :, self._count] = k_row
        self._values[layer, :, self._count] = v_row
        if layer == self._keys.shape[0] - 1:
            self._count += 1
            self._max_pos = position

    def attend(self, layer: int, q_heads: np.ndarray, position: int) -> np.ndarray:
        """Attention of one query row (H, hd) over all stored rows of `layer`.

        During a step the current layer's new row is already written at
        index `count` (append commits the count bump on the last layer),
        so the row attends to itself as well.
        """
        upto = self._count + (1 if self._max_pos < position else 0)
        k = np.asarray(self._keys[layer, :, :upto], dtype=_F64)
        v = np.asarray(self._values[layer, :, :upto], dtype=_F64)
        scores = np.einsum("hd,hnd->hn", q_heads, k) / np.sqrt(self._keys.shape[3])
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        return np.einsum("hn,hnd->hd", w, v)

    def resident_floats(self) -> int:
        shape = self._keys.shape
        return shape[0] * shape[1] * self._count * shape[3] * 2


def decode_step(model: Model, cache: DecodeCache, last_token: int, position: int) -> np.ndarray:
    """One autoregressive step: append the token's KV rows, return logits.

    `cache` may be any object with the DecodeCache append/attend interface
    (the eviction module supplies a compacted variant).
    """
    cfg = model.config
    if not (0 <= int(last_token) < cfg.vocab_size):
        raise InputError(f"token id {last_token} out of vocabulary")
    x = np.asarray(model.weights.embedding[int(last_token)], dtype=_F64)[None, :]
    pos_arr = np.asarray([position], dtype=np.int64)
    for l in range(cfg.n_layers):
        lw = model.weights.layers[l]
        h1 = _rmsnorm(x, lw.attn_gain)
        q = _split_heads(h1 @ np.asarray(lw.wq, dtype=_F64), cfg.n_heads, cfg.head_dim)
        k = _split_heads(h1 @ np.asarray(lw.wk, dtype=_F64), cfg.n_heads, cfg.head_dim)
        v = _split_heads(h1 @ np.asarray(lw.wv, dtype=_F64), cfg.n_heads, cfg.head_dim)
        q_rot = rope_rotate(q, pos_arr, cfg)[:, 0]
        k_rot = rope_rotate(k, pos_arr, cfg)[:, 0]
        cache.append(l, k_rot.astype(DTYPE), v[:, 0].astype(DTYPE), position)
        attn = cache.attend(l, q_rot, position)  # (H, hd)
        t = x + attn.reshape(1, -1) @ np.asarray(lw.wo, dtype=_F64)
        x_out = t + _silu(_rmsnorm(t, lw.ffn_gain) @ np.asarray(lw.w_in, dtype=_F64)) @ np.asarray(
            lw.w_out, dtype=_F64
        )
        x = np.asarray(x_out.astype(DTYPE), dtype=_F64)
    logits = _rmsnorm(x, model.weights.final_gain) @ np.asarray(model.weights.unembed, dtype=_F64)
    return logits[0].astype(DTYPE)


def greedy_token(logits: np.ndarray) -> int:
    # argmax with ties to the lowest id, deterministic.
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# Weight export/import (golden tests only)

_TENSOR_ORDER_DOC = (
    "embedding, then per layer (wq, wk, wv, wo, w_in, w_out, attn_gain, ffn_gain), "
    "then final_gain, then unembed; raw little-endian float32"
)


def _iter_tensors(weights: ModelWeights):
    yield weights.embedding
    for lw in weights.layers:
        yield lw.wq
        yield lw.wk
        yield lw.wv
        yield lw.wo
        yield lw.w_in
        yield lw.w_out
        yield lw.attn_gain
        yield lw.ffn_gain
    yield weights.final_gain
    yield weights.unembed


def save_model(model: Model, path) -> None:
    """Write length-prefixed config JSON followed by tensors in a fixed order."""
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for tensor in _iter_tensors(model.weights):
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise InputError("weight file truncated")
    (blob_len,) = struct.unpack_from("<I", raw, 0)
    config = ModelConfig.from_json(raw[4 : 4 + blob_len].decode("utf-8"))
    weights = init_model(config)  # correct shapes; contents overwritten below
    offset = 4 + blob_len
    for tensor in _iter_tensors(weights):
        nbytes = tensor.size * 4
        if offset + nbytes > len(raw):
            raise InputError("weight file truncated")
        tensor[...] = np.frombuffer(raw, dtype="<f4", count=tensor.size, offset=offset).reshape(
            tensor.shape
        )
        offset += nbytes
    if offset != len(raw):
        raise InputError("weight file has trailing bytes")
    return Model(config=config, weights=weights)
