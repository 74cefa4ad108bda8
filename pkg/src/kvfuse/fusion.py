"""Selective recomputation over a fused chunk cache, plus the reuse baselines.

All strategies except `full` share one pipeline: load chunks, concatenate,
recover global positions, run layers 0 and 1 fully (layer 0 is exact by
construction, layer 1 provides the true queries/keys/values the selection
criteria need), then propagate only the selected rows and the question
through the remaining layers, patching their cache entries as they go.

Strategies:
  attention_aware  top-p document tokens by summed question attention
  kv_diff          top-p by layer-1 value deviation from the true values
  head_tail        first and last k tokens of every document chunk
  none             no recomputation; position recovery only
  full             plain concatenation with per-chunk local positions,
                   question computed fresh; nothing else touched
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import flops as F
from .chunkstore import (
    SegmentMap,
    chunk_id,
    concat_chunks,
    load_chunk,
    recover_positions,
    rotate_chunk_local,
)
from .errors import ConfigError, ContractViolation, InputError, ShapeError
from .model import (
    DTYPE,
    DecodeCache,
    Model,
    _F64,
    _merge_heads,
    _rmsnorm,
    _silu,
    _split_heads,
    attention,
    attention_weights,
    rope_rotate,
)

STRATEGIES = ("attention_aware", "kv_diff", "head_tail", "none", "full")


@dataclass(frozen=True)
class FusionPlan:
    strategy: str
    r: float = 0.15
    head_tail_k: int = 20

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if not (0.0 <= self.r <= 1.0):
            raise ConfigError(f"recompute ratio r must be in [0, 1], got {self.r}")
        if self.head_tail_k < 0:
            raise ConfigError(f"head_tail_k must be >= 0, got {self.head_tail_k}")


@dataclass
class InputSegments:
    """One request: system prompt, document chunks, question. Token ids."""

    system: np.ndarray
    documents: list[np.ndarray]
    question: np.ndarray

    def all_ids(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.system)] + [np.asarray(d) for d in self.documents]
            + [np.asarray(self.question)]
        ).astype(np.int64)

    def context_chunks(self) -> list[np.ndarray]:
        return [np.asarray(self.system)] + [np.asarray(d) for d in self.documents]

    @property
    def n(self) -> int:
        return sum(len(c) for c in self.context_chunks()) + len(self.question)


@dataclass
class RecomputeSet:
    indices: np.ndarray  # sorted global offsets, subset of document spans
    scores: np.ndarray | None  # per document token, aligned with document_offsets()
    strategy: str
    p: int
    clamped: bool = False

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ContractViolation("recompute indices must be strictly increasing")
        self.indices = idx


@dataclass
class PatchedCache:
    """Fused cache after the pipeline ran: layers 0-1 true, layers >= 2
    patched at the selected rows and the question; question rows appended
    at every layer."""

    keys: np.ndarray  # (L, H, n, hd) float32
    values: np.ndarray  # (L, H, n, hd) float32
    segments: SegmentMap
    recompute: RecomputeSet
    patched_offsets: np.ndarray  # rows rewritten at layers >= 2 (Re plus question)
    question_queries: np.ndarray  # (L, H, |Q|, hd) float32, rotated true queries
    rope_recovered: bool
    local_rotation: bool
    token_ids: np.ndarray  # (n,) int64

    @property
    def n(self) -> int:
        return int(self.keys.shape[2])

    def to_decode_cache(self) -> DecodeCache:
        return DecodeCache.from_arrays(self.keys, self.values)


@dataclass
class FusionTrace:
    strategy: str
    r: float
    p: int
    n: int
    n_ctx: int
    q_len: int
    selected: list[int]
    clamped: bool
    durations: dict[str, float] = field(default_factory=dict)
    flops: dict[str, float] = field(default_factory=dict)
    scores_doc: np.ndarray | None = None  # kept for the harness, not serialized
    eviction: dict | None = None

    def to_json_dict(self) -> dict:
        out = {
            "strategy": self.strategy,
            "r": self.r,
            "p": self.p,
            "n": self.n,
            "n_ctx": self.n_ctx,
            "q_len": self.q_len,
            "selected": [int(i) for i in self.selected],
            "clamped": self.clamped,
            "durations_s": {k: float(v) for k, v in self.durations.items()},
            "flops": {k: float(v) for k, v in self.flops.items()},
        }
        if self.eviction is not None:
            out["eviction"] = self.eviction
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Scoring and selection


def score_tokens(q_true: np.ndarray, k_true: np.ndarray, segment_map: SegmentMap) -> np.ndarray:
    """Question-relevance score per document token.

    For each question row, softmax over everything it can causally see,
    averaged over heads, summed over question rows, restricted to
    document offsets. Softmax normalizes over all visible positions, not
    just documents, so a token's score is its actual attention mass.
    """
    q_span = segment_map.question_span
    if q_span.length == 0:
        raise InputError("cannot score with an empty question span")
    q = np.asarray(q_true, dtype=_F64)
    k = np.asarray(k_true, dtype=_F64)
    if q.shape[1] != q_span.length:
        raise ShapeError(f"expected {q_span.length} question rows, got {q.shape[1]}")
    if k.shape[1] != segment_map.n:
        raise ShapeError(f"keys must cover all {segment_map.n} positions, got {k.shape[1]}")
    q_pos = np.arange(q_span.start, q_span.stop, dtype=np.int64)
    k_pos = np.arange(segment_map.n, dtype=np.int64)
    weights = attention_weights(q, k, q_pos, k_pos)  # (H, |Q|, n)
    summed = weights.mean(axis=0).sum(axis=0)  # head average, then sum over rows
    return summed[segment_map.document_offsets()]


def _top_p(scores: np.ndarray, doc_offsets: np.ndarray, p: int) -> np.ndarray:
    # Ties break toward the lower offset: lexsort's last key dominates.
    order = np.lexsort((doc_offsets, -np.asarray(scores, dtype=_F64)))
    return np.sort(doc_offsets[order[:p]])


def _budget(r: float, n: int, n_doc: int) -> tuple[int, bool]:
    p_raw = round(r * n)
    return min(p_raw, n_doc), p_raw > n_doc


def select_recompute(scores: np.ndarray, r: float, n: int, segment_map: SegmentMap) -> RecomputeSet:
    """Top-p document offsets by score; p = round(r * n), n the total length."""
    if not (0.0 <= r <= 1.0):
        raise ConfigError(f"r must be in [0, 1], got {r}")
    doc = segment_map.document_offsets()
    scores = np.asarray(scores, dtype=_F64)
    if scores.shape != doc.shape:
        raise ShapeError(f"scores cover {scores.shape[0]} tokens, documents have {doc.shape[0]}")
    p, clamped = _budget(r, n, doc.shape[0])
    return RecomputeSet(
        indices=_top_p(scores, doc, p), scores=scores, strategy="attention_aware",
        p=p, clamped=clamped,
    )


def select_kv_diff(
    v_cat: np.ndarray, v_true: np.ndarray, r: float, n: int, segment_map: SegmentMap
) -> RecomputeSet:
    """Top-p document offsets by Euclidean deviation of fused layer-1 values.

    v_cat and v_true are (n_heads, n_doc, head_dim) over document offsets;
    the per-token deviation concatenates heads.
    """
    a = np.asarray(v_cat, dtype=_F64)
    b = np.asarray(v_true, dtype=_F64)
    if a.shape != b.shape:
        raise ContractViolation(f"value shapes differ: {a.shape} vs {b.shape}")
    doc = segment_map.document_offsets()
    if a.shape[1] != doc.shape[0]:
        raise ContractViolation(f"values cover {a.shape[1]} tokens, documents have {doc.shape[0]}")
    deviation = np.sqrt(np.sum(np.square(a - b), axis=(0, 2)))  # (n_doc,)
    p, clamped = _budget(r, n, doc.shape[0])
    return RecomputeSet(
        indices=_top_p(deviation, doc, p), scores=deviation, strategy="kv_diff",
        p=p, clamped=clamped,
    )


def select_head_tail(segment_map: SegmentMap, k: int) -> RecomputeSet:
    """First and last k tokens of every document chunk, deduplicated."""
    if k < 0:
        raise InputError(f"k must be >= 0, got {k}")
    picked: list[np.ndarray] = []
    for span in segment_map.document_spans():
        local = np.union1d(np.arange(0, min(k, span.length)),
                           np.arange(max(span.length - k, 0), span.length))
        picked.append(local + span.start)
    indices = np.unique(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)
    return RecomputeSet(
        indices=indices.astype(np.int64), scores=None, strategy="head_tail", p=int(indices.size)
    )


def hit_rate(selected: RecomputeSet, oracle_topk: RecomputeSet) -> float:
    """|selected intersect oracle| / p; an empty budget counts as a full hit."""
    if selected.p != oracle_topk.p:
        raise ContractViolation(
            f"budgets differ: {selected.p} vs {oracle_topk.p}; compare at matched p"
        )
    if selected.p == 0:
        return 1.0
    inter = np.intersect1d(selected.indices, oracle_topk.indices)
    return float(inter.size) / float(selected.p)


# ---------------------------------------------------------------------------
# Fused prefill


def _load_context(model: Model, segments: InputSegments, store_dir, rotate_local: bool):
    fp = model.config.fingerprint()
    chunks = []
    for part in segments.context_chunks():
        chunk = load_chunk(chunk_id(part, fp), store_dir)
        if rotate_local:
            chunk = rotate_chunk_local(chunk, model.config)
        chunks.append(chunk)
    return chunks


def fused_prefill(
    model: Model, segments: InputSegments, plan: FusionPlan, store_dir
) -> tuple[PatchedCache, np.ndarray, FusionTrace]:
    """Run the selective-recomputation prefill; returns first-token logits.

    The system and document chunks must already be in the store. The
    question is always computed fresh. See the module docstring for what
    each strategy does.
    """
    cfg = model.config
    if cfg.n_layers < 2:
        raise ConfigError("the selective pipeline needs at least 2 layers")
    q_ids = np.asarray(segments.question, dtype=np.int64)
    if q_ids.size == 0:
        raise InputError("question must be non-empty")
    if q_ids.min() < 0 or q_ids.max() >= cfg.vocab_size:
        raise InputError("question token out of vocabulary")

    durations: dict[str, float] = {}
    t0 = time.perf_counter()
    chunks = _load_context(model, segments, store_dir, rotate_local=(plan.strategy == "full"))
    durations["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fused = concat_chunks(chunks)
    durations["concat"] = time.perf_counter() - t0

    if plan.strategy == "full":
        patched, logits = _question_only_prefill(model, fused, q_ids, durations)
        rset = patched.recompute
        scores_doc = None
    else:
        t0 = time.perf_counter()
        recover_positions(fused, cfg)
        durations["recover"] = time.perf_counter() - t0
        patched, logits, rset, scores_doc = _selective_prefill(
            model, fused, q_ids, plan, durations
        )

    n, n_ctx, q_len = patched.n, patched.n - q_ids.size, int(q_ids.size)
    if plan.strategy == "full":
        prefill_cost = F.question_only_flops(cfg, n, q_len)
    elif plan.strategy == "head_tail":
        prefill_cost = F.fused_flops_rows(cfg, n, rset.p + q_len)
    else:
        prefill_cost = F.fused_flops(cfg, n, plan.r if plan.strategy != "none" else 0.0, q_len)
    trace = FusionTrace(
        strategy=plan.strategy,
        r=plan.r,
        p=rset.p,
        n=n,
        n_ctx=n_ctx,
        q_len=q_len,
        selected=[int(i) for i in rset.indices],
        clamped=rset.clamped,
        durations=durations,
        flops={
            "prefill": prefill_cost,
            "vanilla": F.vanilla_flops(cfg, n),
            "scoring": F.scoring_flops(cfg, n, q_len, n_ctx - len(segments.system), plan.strategy),
        },
        scores_doc=scores_doc,
    )
    return patched, logits, trace


def _selective_prefill(model, fused, q_ids, plan, durations):
    cfg = model.config
    w = model.weights
    n_ctx = fused.n
    q_len = q_ids.size
    n = n_ctx + q_len
    segmap = fused.segments.with_question_length(q_len)
    doc_offsets = segmap.document_offsets()
    all_ids = np.concatenate([fused.token_ids.astype(np.int64), q_ids])
    pos = np.arange(n, dtype=np.int64)
    q_rows = np.arange(n_ctx, n, dtype=np.int64)

    t0 = time.perf_counter()
    out_keys = np.empty((cfg.n_layers, cfg.n_heads, n, cfg.head_dim), dtype=DTYPE)
    out_values = np.empty_like(out_keys)
    question_queries = np.empty((cfg.n_layers, cfg.n_heads, q_len, cfg.head_dim), dtype=DTYPE)

    # Layer 0, all rows. Queries are fresh; keys/values for the context come
    # from the recovered cache (exact at this layer), question rows fresh.
    x = np.asarray(w.embedding[all_ids], dtype=_F64)
    lw = w.layers[0]
    h1 = _rmsnorm(x, lw.attn_gain)
    q0 = rope_rotate(_split_heads(h1 @ np.asarray(lw.wq, dtype=_F64), cfg.n_heads, cfg.head_dim), pos, cfg)
    k0 = rope_rotate(_split_heads(h1 @ np.asarray(lw.wk, dtype=_F64), cfg.n_heads, cfg.head_dim), pos, cfg)
    v0 = _split_heads(h1 @ np.asarray(lw.wv, dtype=_F64), cfg.n_heads, cfg.head_dim)
    cache_k0 = np.concatenate([np.asarray(fused.keys[0], dtype=_F64), k0[:, n_ctx:]], axis=1)
    cache_v0 = np.concatenate([np.asarray(fused.values[0], dtype=_F64), v0[:, n_ctx:]], axis=1)
    attn0 = attention(q0, cache_k0, cache_v0, pos, pos)
    t = x + _merge_heads(attn0) @ np.asarray(lw.wo, dtype=_F64)
    x = t + _silu(_rmsnorm(t, lw.ffn_gain) @ np.asarray(lw.w_in, dtype=_F64)) @ np.asarray(lw.w_out, dtype=_F64)
    out_keys[0], out_values[0] = k0.astype(DTYPE), v0.astype(DTYPE)
    question_queries[0] = q0[:, n_ctx:].astype(DTYPE)
    x = np.asarray(x.astype(DTYPE), dtype=_F64)

    # Layer 1, all rows, fully true.
    lw = w.layers[1]
    h1 = _rmsnorm(x, lw.attn_gain)
    q1 = rope_rotate(_split_heads(h1 @ np.asarray(lw.wq, dtype=_F64), cfg.n_heads, cfg.head_dim), pos, cfg)
    k1 = rope_rotate(_split_heads(h1 @ np.asarray(lw.wk, dtype=_F64), cfg.n_heads, cfg.head_dim), pos, cfg)
    v1 = _split_heads(h1 @ np.asarray(lw.wv, dtype=_F64), cfg.n_heads, cfg.head_dim)
    fused_v1_doc = fused.values[1][:, doc_offsets].copy()  # pre-overwrite, for kv_diff
    out_keys[1], out_values[1] = k1.astype(DTYPE), v1.astype(DTYPE)
    question_queries[1] = q1[:, n_ctx:].astype(DTYPE)
    durations["layer01"] = time.perf_counter() - t0

    # Selection from layer-1 quantities. Scores are recorded for every
    # strategy in this pipeline so the harness can compare any selection
    # against the attention oracle at matched budget.
    t0 = time.perf_counter()
    scores_doc = score_tokens(q1[:, n_ctx:], k1, segmap)
    if plan.strategy == "attention_aware":
        rset = select_recompute(scores_doc, plan.r, n, segmap)
    elif plan.strategy == "kv_diff":
        rset = select_kv_diff(fused_v1_doc, out_values[1][:, doc_offsets], plan.r, n, segmap)
    elif plan.strategy == "head_tail":
        rset = select_head_tail(segmap, plan.head_tail_k)
    else:  # none
        rset = RecomputeSet(indices=np.zeros(0, dtype=np.int64), scores=None, strategy="none", p=0)
    durations["select"] = time.perf_counter() - t0

    # Rows carried through the rest of the network: Re plus the question.
    t0 = time.perf_counter()
    rows = np.concatenate([rset.indices, q_rows])
    x = x[rows]
    attn1 = attention(q1[:, rows], k1, v1, pos[rows], pos)
    t = x + _merge_heads(attn1) @ np.asarray(lw.wo, dtype=_F64)
    x = t + _silu(_rmsnorm(t, lw.ffn_gain) @ np.asarray(lw.w_in, dtype=_F64)) @ np.asarray(lw.w_out, dtype=_F64)
    x = np.asarray(x.astype(DTYPE), dtype=_F64)

    for l in range(2, cfg.n_layers):
        lw = w.layers[l]
        h1 = _rmsnorm(x, lw.attn_gain)
        q_r = rope_rotate(_split_heads(h1 @ np.asarray(lw.wq, dtype=_F64), cfg.n_heads, cfg.head_dim), pos[rows], cfg)
        k_r = rope_rotate(_split_heads(h1 @ np.asarray(lw.wk, dtype=_F64), cfg.n_heads, cfg.head_dim), pos[rows], cfg)
        v_r = _split_heads(h1 @ np.asarray(lw.wv, dtype=_F64), cfg.n_heads, cfg.head_dim)
        # Patch: untouched offsets keep the recovered chunk entries bitwise.
        out_keys[l, :, :n_ctx] = fused.keys[l]
        out_values[l, :, :n_ctx] = fused.values[l]
        out_keys[l][:, rows] = k_r.astype(DTYPE)
        out_values[l][:, rows] = v_r.astype(DTYPE)
        question_queries[l] = q_r[:, -q_len:].astype(DTYPE)
        attn = attention(
            q_r,
            np.asarray(out_keys[l], dtype=_F64),
            np.asarray(out_values[l], dtype=_F64),
            pos[rows],
            pos,
        )
        t = x + _merge_heads(attn) @ np.asarray(lw.wo, dtype=_F64)
        x = t + _silu(_rmsnorm(t, lw.ffn_gain) @ np.asarray(lw.w_in, dtype=_F64)) @ np.asarray(lw.w_out, dtype=_F64)
        x = np.asarray(x.astype(DTYPE), dtype=_F64)
    durations["patch"] = time.perf_counter() - t0

    logits = (_rmsnorm(x[-1:], w.final_gain) @ np.asarray(w.unembed, dtype=_F64))[0].astype(DTYPE)
    patched = PatchedCache(
        keys=out_keys,
        values=out_values,
        segments=segmap,
        recompute=rset,
        patched_offsets=rows.copy(),
        question_queries=question_queries,
        rope_recovered=True,
        local_rotation=False,
        token_ids=all_ids,
    )
    return patched, logits, rset, scores_doc


def _question_only_prefill(model, fused, q_ids, durations):
    """Plain concatenation: chunk caches keep their local rotation; only the
    question is computed, at its correct global positions."""
    cfg = model.config
    w = model.weights
    n_ctx = fused.n
    q_len = q_ids.size
    n = n_ctx + q_len
    segmap = fused.segments.with_question_length(q_len)
    pos_all = np.arange(n, dtype=np.int64)
    q_pos = pos_all[n_ctx:]

    t0 = time.perf_counter()
    out_keys = np.empty((cfg.n_layers, cfg.n_heads, n, cfg.head_dim), dtype=DTYPE)
    out_values = np.empty_like(out_keys)
    question_queries = np.empty((cfg.n_layers, cfg.n_heads, q_len, cfg.head_dim), dtype=DTYPE)
    x = np.asarray(w.embedding[q_ids], dtype=_F64)
    for l in range(cfg.n_layers):
        lw = w.layers[l]
        h1 = _rmsnorm(x, lw.attn_gain)
        q_r = rope_rotate(_split_heads(h1 @ np.asarray(lw.wq, dtype=_F64), cfg.n_heads, cfg.head_dim), q_pos, cfg)
        k_r = rope_rotate(_split_heads(h1 @ np.asarray(lw.wk, dtype=_F64), cfg.n_heads, cfg.head_dim), q_pos, cfg)
        v_r = _split_heads(h1 @ np.asarray(lw.wv, dtype=_F64), cfg.n_heads, cfg.head_dim)
        out_keys[l, :, :n_ctx] = fused.keys[l]
        out_values[l, :, :n_ctx] = fused.values[l]
        out_keys[l, :, n_ctx:] = k_r.astype(DTYPE)
        out_values[l, :, n_ctx:] = v_r.astype(DTYPE)
        question_queries[l] = q_r.astype(DTYPE)
        # Causality by row offset: the chunk rows all precede the question.
        attn = attention(
            q_r,
            np.asarray(out_keys[l], dtype=_F64),
            np.asarray(out_values[l], dtype=_F64),
            q_pos,
            pos_all,
        )
        t = x + _merge_heads(attn) @ np.asarray(lw.wo, dtype=_F64)
        x = t + _silu(_rmsnorm(t, lw.ffn_gain) @ np.asarray(lw.w_in, dtype=_F64)) @ np.asarray(lw.w_out, dtype=_F64)
        x = np.asarray(x.astype(DTYPE), dtype=_F64)
    durations["question"] = time.perf_counter() - t0

    logits = (_rmsnorm(x[-1:], w.final_gain) @ np.asarray(w.unembed, dtype=_F64))[0].astype(DTYPE)
    rset = RecomputeSet(indices=np.zeros(0, dtype=np.int64), scores=None, strategy="full", p=0)
    patched = PatchedCache(
        keys=out_keys,
        values=out_values,
        segments=segmap,
        recompute=rset,
        patched_offsets=q_pos.copy(),
        question_queries=question_queries,
        rope_recovered=False,
        local_rotation=True,
        token_ids=np.concatenate([fused.token_ids.astype(np.int64), q_ids]),
    )
    return patched, logits
