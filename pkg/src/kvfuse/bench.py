"""Quantitative harness: oracle comparisons, FLOP accounting, timing, reports.

Quality at desk scale is token-level agreement with the no-reuse greedy
decode, which upper-bounds every reuse strategy. Agreement, attention-map
losses, and hit rates are averaged over seeds; TTFT/TPOT are medians over
repetitions on one instance, with warm-up discarded and scoring time kept
out of the per-token figure (it is reported separately).
"""

from __future__ import annotations

import csv
import json
import os
import statistics
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import flops as F
from .chunkstore import precompute_chunk, store_chunk
from .errors import ConfigError, InputError
from .eviction import CompactedCache, EvictionPolicy, evict
from .fusion import (
    STRATEGIES,
    FusionPlan,
    FusionTrace,
    InputSegments,
    PatchedCache,
    RecomputeSet,
    _top_p,
    fused_prefill,
    hit_rate,
)
from .model import (
    DecodeCache,
    Model,
    ModelConfig,
    PrefillResult,
    attention_weights,
    build_model,
    decode_step,
    greedy_token,
    prefill_forward,
)

ALL_STRATEGIES = ("vanilla",) + STRATEGIES

CSV_COLUMNS = [
    "strategy",
    "r",
    "evict",
    "n",
    "L",
    "ttft_ms",
    "tpot_ms",
    "flops_prefill",
    "attn_l2_by_layer",
    "hit_rate",
    "first_token_agree",
    "gen_agree_frac",
    "peak_kv_floats",
]


# ---------------------------------------------------------------------------
# Synthetic inputs


@dataclass(frozen=True)
class InputRecipe:
    n_doc_chunks: int
    chunk_len: int
    system_len: int
    question_len: int
    data_seed: int = 0
    kind: str = "uniform"  # or "needle"
    needle_len: int = 8

    def __post_init__(self) -> None:
        for name in ("n_doc_chunks", "chunk_len", "system_len", "question_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kind not in ("uniform", "needle"):
            raise ConfigError(f"unknown input kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.system_len + self.n_doc_chunks * self.chunk_len + self.question_len


def _draw_ids(seed: int, stream: int, n: int, vocab: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))
    return gen.integers(0, vocab, size=n).astype(np.int64)


def build_instance(recipe: InputRecipe, config: ModelConfig) -> InputSegments:
    """Deterministic synthetic request; streams keyed per segment.

    The needle kind plants a run of one distinctive token in the middle of
    a single document chunk and ends the question with that token, a small
    stand-in for retrieval-style tasks. It shapes the input only; nothing
    is asserted about the continuation.
    """
    vocab = config.vocab_size
    seed = recipe.data_seed
    system = _draw_ids(seed, 0, recipe.system_len, vocab)
    docs = [
        _draw_ids(seed, 1 + i, recipe.chunk_len, vocab) for i in range(recipe.n_doc_chunks)
    ]
    question = _draw_ids(seed, 1 + recipe.n_doc_chunks, recipe.question_len, vocab)
    if recipe.kind == "needle":
        marker = vocab - 1
        target = seed % recipe.n_doc_chunks
        run = min(recipe.needle_len, recipe.chunk_len)
        start = (recipe.chunk_len - run) // 2
        docs[target][start : start + run] = marker
        tail = min(max(1, recipe.needle_len // 2), recipe.question_len)
        question[-tail:] = marker
    return InputSegments(system=system, documents=docs, question=question)


def populate_store(model: Model, segments: InputSegments, store_dir) -> list[str]:
    """Precompute and persist every context chunk; returns hex ids in order."""
    ids = []
    for part in segments.context_chunks():
        chunk = precompute_chunk(part, model)
        store_chunk(chunk, store_dir)
        ids.append(chunk.chunk_id.hex())
    return ids


# ---------------------------------------------------------------------------
# Metrics


def attention_l2_loss(
    patched: PatchedCache,
    vanilla: PrefillResult,
    layer: int,
    probe_rows: np.ndarray | None = None,
) -> float:
    """Frobenius distance between attention maps at one layer.

    Probe rows default to the question span. Both maps use the oracle's
    true queries for those rows, one against the oracle keys and one
    against the supplied cache, so the number isolates cache quality.
    """
    if vanilla.queries is None:
        raise InputError("vanilla result must be run with record_queries=True")
    n_layers = len(vanilla.caches)
    if not (0 <= layer < n_layers):
        raise InputError(f"layer {layer} out of range [0, {n_layers})")
    n = patched.n
    if vanilla.caches[layer].length != n:
        raise InputError("caches cover different token sequences")
    if probe_rows is None:
        q_span = patched.segments.question_span
        probe_rows = np.arange(q_span.start, q_span.stop, dtype=np.int64)
    probe_rows = np.asarray(probe_rows, dtype=np.int64)
    k_pos = np.arange(n, dtype=np.int64)
    q = vanilla.queries[layer][:, probe_rows]
    w_true = attention_weights(q, vanilla.caches[layer].keys, probe_rows, k_pos)
    w_cache = attention_weights(q, patched.keys[layer], probe_rows, k_pos)
    return float(np.linalg.norm(w_true - w_cache))


def flops_estimate(
    plan: FusionPlan | None,
    n: int,
    config: ModelConfig,
    *,
    q_len: int,
    selected_rows: int | None = None,
) -> float:
    """Closed-form prefill FLOPs for a plan (None means the vanilla path).

    head_tail has no ratio, so its actual selected-row count must be
    passed; budgeted strategies derive rows from r.
    """
    if plan is None:
        return F.vanilla_flops(config, n)
    if plan.strategy == "full":
        return F.question_only_flops(config, n, q_len)
    if plan.strategy == "head_tail":
        if selected_rows is None:
            raise InputError("head_tail needs selected_rows for the FLOP estimate")
        return F.fused_flops_rows(config, n, selected_rows + q_len)
    r = 0.0 if plan.strategy == "none" else plan.r
    return F.fused_flops(config, n, r, q_len)


def oracle_top_p(scores_doc: np.ndarray, p: int, segments) -> RecomputeSet:
    """Attention-oracle selection at budget p from recorded layer-1 scores."""
    doc = segments.document_offsets()
    return RecomputeSet(
        indices=_top_p(np.asarray(scores_doc), doc, p),
        scores=np.asarray(scores_doc),
        strategy="attention_aware",
        p=p,
    )


# ---------------------------------------------------------------------------
# Running one strategy


@dataclass
class StrategyRun:
    strategy: str
    evicted: bool
    tokens: np.ndarray
    first_logits: np.ndarray
    trace: FusionTrace | None
    patched: PatchedCache | None
    cache: DecodeCache | CompactedCache
    prefill_seconds: float
    decode_seconds: list[float]


def _decode_loop(model, cache, first_logits, start_pos: int, length: int):
    tokens = [greedy_token(first_logits)]
    seconds = []
    for step in range(length - 1):
        t0 = time.perf_counter()
        logits = decode_step(model, cache, tokens[-1], start_pos + step)
        seconds.append(time.perf_counter() - t0)
        tokens.append(greedy_token(logits))
    return np.asarray(tokens, dtype=np.int64), seconds


def run_strategy(
    model: Model,
    segments: InputSegments,
    strategy: str,
    store_dir,
    *,
    r: float = 0.15,
    head_tail_k: int = 20,
    gen_len: int = 16,
    eviction: EvictionPolicy | None = None,
) -> StrategyRun:
    """Prefill under one strategy, optionally evict after the first token,
    then greedy-decode `gen_len` tokens in total."""
    if strategy not in ALL_STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if gen_len < 1:
        raise InputError("gen_len must be >= 1")
    n = segments.n
    if strategy == "vanilla":
        t0 = time.perf_counter()
        res = prefill_forward(model, segments.all_ids())
        prefill_s = time.perf_counter() - t0
        cache = DecodeCache.from_layer_kvs(model.config, res.caches)
        trace = None
        patched = None
        first_logits = res.logits
    else:
        plan = FusionPlan(strategy, r=r, head_tail_k=head_tail_k)
        t0 = time.perf_counter()
        patched, first_logits, trace = fused_prefill(model, segments, plan, store_dir)
        prefill_s = time.perf_counter() - t0
        cache = patched.to_decode_cache()
    evicted = False
    if eviction is not None and eviction.enabled and strategy != "vanilla":
        # The first token comes from the prefill logits; eviction runs once
        # before any decode step, so generated rows are never dropped.
        cache = evict(patched, eviction)
        evicted = True
        if trace is not None:
            trace.eviction = {"capacity": eviction.capacity, "kernel": eviction.kernel,
                              **cache.summary()}
    tokens, decode_s = _decode_loop(model, cache, first_logits, n, gen_len)
    return StrategyRun(
        strategy=strategy,
        evicted=evicted,
        tokens=tokens,
        first_logits=first_logits,
        trace=trace,
        patched=patched,
        cache=cache,
        prefill_seconds=prefill_s,
        decode_seconds=decode_s,
    )


def greedy_generate(
    model: Model,
    strategy: str,
    segments: InputSegments,
    length: int,
    store_dir=None,
    **kwargs,
) -> np.ndarray:
    """Token sequence of greedy decoding under a strategy."""
    return run_strategy(model, segments, strategy, store_dir, gen_len=length, **kwargs).tokens


def time_ttft_tpot(
    model: Model,
    segments: InputSegments,
    strategy: str,
    store_dir,
    *,
    r: float = 0.15,
    head_tail_k: int = 20,
    gen_len: int = 16,
    repetitions: int = 5,
    warmup: int = 3,
    eviction: EvictionPolicy | None = None,
) -> dict:
    """Median TTFT/TPOT in milliseconds; scoring time reported separately.

    TTFT covers the whole serving path to first-token logits, chunk
    loading included. TPOT is the mean per-token decode time within a run,
    median across repetitions.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    ttfts, tpots, scores = [], [], []
    for i in range(warmup + repetitions):
        run = run_strategy(
            model, segments, strategy, store_dir,
            r=r, head_tail_k=head_tail_k, gen_len=gen_len, eviction=eviction,
        )
        if i < warmup:
            continue
        ttfts.append(run.prefill_seconds * 1e3)
        if run.decode_seconds:
            tpots.append(float(np.mean(run.decode_seconds)) * 1e3)
        if run.trace is not None and "select" in run.trace.durations:
            scores.append(run.trace.durations["select"] * 1e3)
    out = {"ttft_ms": statistics.median(ttfts)}
    out["tpot_ms"] = statistics.median(tpots) if tpots else float("nan")
    out["score_ms"] = statistics.median(scores) if scores else None
    return out


# ---------------------------------------------------------------------------
# Bench configuration and report


@dataclass
class BenchConfig:
    model: ModelConfig
    recipe: InputRecipe
    strategies: list[str] = field(default_factory=lambda: list(ALL_STRATEGIES))
    r_grid: list[float] = field(default_factory=lambda: [0.15])
    head_tail_k: int = 20
    eviction: EvictionPolicy | None = None
    evict_strategies: list[str] = field(default_factory=lambda: ["attention_aware"])
    gen_len: int = 16
    gen_len_sweep: list[int] | None = None
    repetitions: int = 3
    warmup: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    probe_all_rows: bool = False
    throughput_batches: list[int] | None = None
    parallel_workers: int = 0
    acceptance: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        for s in self.strategies:
            if s not in ALL_STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        if self.gen_len < 1 or self.repetitions < 1 or not self.seeds:
            raise ConfigError("gen_len and repetitions must be >= 1; seeds non-empty")
        if self.gen_len_sweep is not None and any(g < 2 for g in self.gen_len_sweep):
            raise ConfigError("gen_len_sweep lengths must be >= 2 for a per-token figure")
        for r in self.r_grid:
            if not (0.0 <= r <= 1.0):
                raise ConfigError(f"r value {r} outside [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown bench config keys: {sorted(unknown)}")
        if "model" not in data or "recipe" not in data:
            raise ConfigError("bench config requires 'model' and 'recipe'")
        kwargs = dict(data)
        kwargs["model"] = ModelConfig.from_dict(data["model"])
        kwargs["recipe"] = InputRecipe(**data["recipe"])
        if data.get("eviction") is not None:
            ev = dict(data["eviction"])
            if "protected" in ev:
                ev["protected"] = tuple(ev["protected"])
            kwargs["eviction"] = EvictionPolicy(**ev)
        return cls(**kwargs)


@dataclass
class BenchReport:
    rows: list[dict]
    throughput: list[dict] = field(default_factory=list)
    r_sweep: list[dict] = field(default_factory=list)
    timing_sweep: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in CSV_COLUMNS})

    def write_json(self, path) -> None:
        payload = {"rows": self.rows}
        if self.throughput:
            payload["throughput"] = self.throughput
        if self.r_sweep:
            payload["r_sweep"] = self.r_sweep
        if self.timing_sweep:
            payload["timing_sweep"] = self.timing_sweep
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(value, places=6) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.{places}g}"
    return str(value)


def _row_key(strategy: str, r: float | None, evicted: bool):
    return (strategy, None if r is None else round(float(r), 10), evicted)


def _expand_rows(config: BenchConfig) -> list[tuple[str, float | None, bool]]:
    rows = []
    for strategy in config.strategies:
        if strategy in ("attention_aware", "kv_diff"):
            variants = [(strategy, r) for r in config.r_grid]
        else:
            variants = [(strategy, None)]
        for strategy_, r in variants:
            rows.append((strategy_, r, False))
            if (
                config.eviction is not None
                and strategy_ in config.evict_strategies
                and strategy_ != "vanilla"
            ):
                rows.append((strategy_, r, True))
    return rows


def _seed_metrics(args) -> dict:
    """Non-timing metrics for one seed; shaped for cross-seed averaging.

    Top-level so a process pool can run seeds in parallel; everything in
    `args` is picklable and the store directory is per-call.
    """
    (model_cfg, recipe, row_keys, head_tail_k, gen_len, eviction, probe_all) = args
    model = build_model(model_cfg)
    segments = build_instance(recipe, model_cfg)
    out: dict = {}
    with tempfile.TemporaryDirectory() as store:
        populate_store(model, segments, store)
        oracle = prefill_forward(model, segments.all_ids(), record_queries=True)
        van_cache = DecodeCache.from_layer_kvs(model_cfg, oracle.caches)
        vanilla_tokens, _ = _decode_loop(model, van_cache, oracle.logits, segments.n, gen_len)
        n = segments.n
        probe_rows = np.arange(n) if probe_all else None
        for strategy, r, evicted in row_keys:
            if strategy == "vanilla":
                run_tokens = vanilla_tokens
                losses = [0.0] * model_cfg.n_layers
                hit = None
                flops_val = flops_estimate(None, n, model_cfg, q_len=len(segments.question))
                resident = van_cache.resident_floats()
            else:
                run = run_strategy(
                    model, segments, strategy, store,
                    r=(r if r is not None else 0.15),
                    head_tail_k=head_tail_k,
                    gen_len=gen_len,
                    eviction=(eviction if evicted else None),
                )
                run_tokens = run.tokens
                losses = [
                    attention_l2_loss(run.patched, oracle, l, probe_rows)
                    for l in range(model_cfg.n_layers)
                ]
                if strategy in ("attention_aware", "kv_diff", "head_tail"):
                    oracle_sel = oracle_top_p(
                        run.trace.scores_doc, run.trace.p, run.patched.segments
                    )
                    hit = hit_rate(run.patched.recompute, oracle_sel)
                else:
                    hit = None
                flops_val = flops_estimate(
                    FusionPlan(strategy, r=(r if r is not None else 0.15), head_tail_k=head_tail_k),
                    n, model_cfg, q_len=len(segments.question),
                    selected_rows=(run.trace.p if strategy == "head_tail" else None),
                )
                resident = run.cache.resident_floats()
            out[_row_key(strategy, r, evicted)] = {
                "first_agree": float(run_tokens[0] == vanilla_tokens[0]),
                "gen_agree": float(np.mean(run_tokens == vanilla_tokens)),
                "losses": losses,
                "hit": hit,
                "flops": flops_val,
                "peak_kv": int(resident),
                "n": n,
            }
    return out


def run_bench(config: BenchConfig, out_dir=None) -> BenchReport:
    """One report row per (strategy, r, eviction); CSV/JSON written if out_dir."""
    model = build_model(config.model)
    row_keys = _expand_rows(config)
    seed_args = [
        (
            config.model,
            InputRecipe(**{**_recipe_dict(config.recipe), "data_seed": config.recipe.data_seed + s}),
            row_keys,
            config.head_tail_k,
            config.gen_len,
            config.eviction,
            config.probe_all_rows,
        )
        for s in config.seeds
    ]
    if config.parallel_workers > 1:
        with ProcessPoolExecutor(max_workers=config.parallel_workers) as pool:
            per_seed = list(pool.map(_seed_metrics, seed_args))
    else:
        per_seed = [_seed_metrics(a) for a in seed_args]

    # Timing on the first seed's instance, all repetitions, sequential.
    segments = build_instance(seed_args[0][1], config.model)
    timing: dict = {}
    timing_sweep: list[dict] = []
    with tempfile.TemporaryDirectory() as store:
        populate_store(model, segments, store)
        for strategy, r, evicted in row_keys:
            timing[_row_key(strategy, r, evicted)] = time_ttft_tpot(
                model, segments, strategy, store,
                r=(r if r is not None else 0.15),
                head_tail_k=config.head_tail_k,
                gen_len=config.gen_len,
                repetitions=config.repetitions,
                warmup=config.warmup,
                eviction=(config.eviction if evicted else None),
            )
        if config.gen_len_sweep:
            for strategy in config.strategies:
                for gen_len in config.gen_len_sweep:
                    t = time_ttft_tpot(
                        model, segments, strategy, store,
                        r=config.r_grid[0], head_tail_k=config.head_tail_k,
                        gen_len=gen_len, repetitions=config.repetitions,
                        warmup=config.warmup,
                    )
                    timing_sweep.append(
                        {
                            "strategy": strategy,
                            "gen_len": gen_len,
                            "ttft_ms": _fmt(t["ttft_ms"]),
                            "tpot_ms": _fmt(t["tpot_ms"]),
                        }
                    )

    rows = []
    for key in row_keys:
        strategy, r, evicted = key
        per = [m[key] for m in per_seed]
        losses = np.mean([p["losses"] for p in per], axis=0)
        hits = [p["hit"] for p in per if p["hit"] is not None]
        rows.append(
            {
                "strategy": strategy,
                "r": _fmt(r),
                "evict": "true" if evicted else "false",
                "n": per[0]["n"],
                "L": config.model.n_layers,
                "ttft_ms": _fmt(timing[key]["ttft_ms"]),
                "tpot_ms": _fmt(timing[key]["tpot_ms"]),
                "flops_prefill": _fmt(float(np.mean([p["flops"] for p in per]))),
                "attn_l2_by_layer": ";".join(_fmt(v) for v in losses),
                "hit_rate": _fmt(float(np.mean(hits)) if hits else None),
                "first_token_agree": _fmt(float(np.mean([p["first_agree"] for p in per]))),
                "gen_agree_frac": _fmt(float(np.mean([p["gen_agree"] for p in per]))),
                "peak_kv_floats": int(np.max([p["peak_kv"] for p in per])),
            }
        )
    report = BenchReport(rows=rows, timing_sweep=timing_sweep)

    if config.throughput_batches:
        report.throughput = throughput_sweep(model, config)
    if len(config.r_grid) > 1 and "attention_aware" in config.strategies:
        report.r_sweep = [
            {
                "r": row["r"],
                "gen_agree_frac": row["gen_agree_frac"],
                "first_token_agree": row["first_token_agree"],
            }
            for row in rows
            if row["strategy"] == "attention_aware" and row["evict"] == "false"
        ]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report.write_csv(os.path.join(out_dir, "report.csv"))
        report.write_json(os.path.join(out_dir, "report.json"))
        if report.timing_sweep:
            with open(os.path.join(out_dir, "timing_sweep.csv"), "w", newline="") as fh:
                writer = csv.DictWriter(
                    fh, fieldnames=["strategy", "gen_len", "ttft_ms", "tpot_ms"],
                    lineterminator="\n",
                )
                writer.writeheader()
                writer.writerows(report.timing_sweep)
    return report


def _recipe_dict(recipe: InputRecipe) -> dict:
    return {f.name: getattr(recipe, f.name) for f in fields(recipe)}


def throughput_sweep(model: Model, config: BenchConfig) -> list[dict]:
    """Tokens/sec over batches of independent sequential requests."""
    rows = []
    with tempfile.TemporaryDirectory() as store:
        instances = []
        for i in range(max(config.throughput_batches)):
            recipe = InputRecipe(
                **{**_recipe_dict(config.recipe), "data_seed": config.recipe.data_seed + 1000 + i}
            )
            segments = build_instance(recipe, config.model)
            populate_store(model, segments, store)
            instances.append(segments)
        for strategy in config.strategies:
            for batch in config.throughput_batches:
                t0 = time.perf_counter()
                for segments in instances[:batch]:
                    run_strategy(
                        model, segments, strategy, store,
                        r=config.r_grid[0], head_tail_k=config.head_tail_k,
                        gen_len=config.gen_len, eviction=None,
                    )
                elapsed = time.perf_counter() - t0
                rows.append(
                    {
                        "strategy": strategy,
                        "batch": batch,
                        "tokens_per_s": _fmt(batch * config.gen_len / elapsed),
                    }
                )
    return rows


# ---------------------------------------------------------------------------
# Acceptance blocks (cmd_bench exit-code contract)

_OPS = {
    ">=": lambda a, b: a >= b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    "<": lambda a, b: a < b,
    "==": lambda a, b: a == b,
}


def _find_row(rows: list[dict], where: dict) -> dict:
    def same(a, b) -> bool:
        return str(a).lower() == str(b).lower()

    matches = [row for row in rows if all(same(row.get(k), v) for k, v in where.items())]
    if len(matches) != 1:
        raise ConfigError(f"selector {where} matched {len(matches)} rows, need exactly 1")
    return matches[0]


def evaluate_acceptance(report: BenchReport, assertions: list[dict]) -> list[dict]:
    """Each assertion compares a row metric against a constant or another row."""
    results = []
    for check in assertions:
        metric = check["metric"]
        op = _OPS[check["op"]]
        left = float(_find_row(report.rows, check["where"])[metric])
        if "where_right" in check:
            right = float(_find_row(report.rows, check["where_right"])[metric])
        else:
            right = float(check["value"])
        ok = bool(op(left, right))
        results.append(
            {
                "name": check.get("name", f"{metric} {check['op']}"),
                "ok": ok,
                "left": left,
                "right": right,
                "op": check["op"],
            }
        )
    return results
