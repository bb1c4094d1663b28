"""Embedding-bag microbenchmarks over pooling factor and TT rank.

Timing uses ``time.perf_counter``; warm-up calls are discarded and the
reported centre is the median of group means, which shrugs off the odd
scheduler hiccup better than a plain mean.
"""
from __future__ import annotations

import io
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import ops
from .cache import LfuCache
from .core import TtTable, plan_shapes
from .data import sample_zipf
from .initializer import InitSpec, init_tt_cores
from .model import ModelConfig
from .ops import IndexBatch

CSV_COLUMNS = (
    "pooling", "rank", "batch_size", "lookups", "reps",
    "us_per_sample", "std_us_per_sample", "us_per_lookup", "std_us_per_lookup", "mom_us_per_lookup",
)


@dataclass
class BenchRow:
    pooling: int
    rank: int
    batch_size: int
    lookups: int
    reps: int
    us_per_sample: float
    std_us_per_sample: float
    us_per_lookup: float
    std_us_per_lookup: float
    mom_us_per_lookup: float


def median_of_means(samples: Sequence[float], groups: int = 5) -> float:
    chunks = np.array_split(np.asarray(samples, dtype=np.float64), min(groups, len(samples)))
    return float(statistics.median(float(c.mean()) for c in chunks))


def time_call(fn, reps: int = 30, warmup: int = 3) -> np.ndarray:
    """Seconds per call for ``reps`` timed calls after ``warmup`` discarded ones."""
    for _ in range(warmup):
        fn()
    out = np.empty(reps)
    for r in range(reps):
        start = time.perf_counter()
        fn()
        out[r] = time.perf_counter() - start
    return out


def _bag_batch(rng, rows: int, batch_size: int, pooling: int, s: float) -> IndexBatch:
    offsets = np.arange(0, batch_size * pooling + 1, pooling, dtype=np.int64)
    return IndexBatch(sample_zipf(rng, rows, s, batch_size * pooling), offsets)


def _tt_tables(config: ModelConfig, rank: int, seed: int) -> list[TtTable]:
    tables = []
    for t, tc in enumerate(config.tables):
        plan = plan_shapes(tc.num_rows, config.emb_dim, config.tt_dim, rank)
        table = TtTable.zeros(plan, np.float32, name=f"emb{t}")
        init_tt_cores(table, InitSpec.sampled_gaussian(fan_in=config.emb_dim, rank_normalize=True), seed + t)
        tables.append(table)
    return tables


def bench_pooling(config: ModelConfig, pooling_values: Sequence[int] = (1, 10, 100),
                  rank_values: Sequence[int] = (8, 16, 32, 64), batch_size: int = 64,
                  reps: int = 30, warmup: int = 3, seed: int = 0, zipf_s: float = 1.05,
                  micro_batch: int = ops.DEFAULT_MICRO_BATCH) -> list[BenchRow]:
    """Forward+backward time of the TT embedding stage (all tables, no cache).

    One row per (pooling, rank). ``us_per_sample`` divides by the number of
    bags in a batch, ``us_per_lookup`` by the number of lookups. Repetitions
    are interleaved across all cells, so slow drift in machine state (clock,
    caches, other load) lands on every cell alike rather than on whichever
    runs first.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    cells = []
    for pooling in pooling_values:
        for rank in rank_values:
            rng = np.random.default_rng([seed, pooling, rank])
            tables = _tt_tables(config, rank, seed)
            batches = [_bag_batch(rng, t.num_rows, batch_size, pooling, zipf_s) for t in tables]
            grads_out = [rng.standard_normal((batch_size, config.emb_dim)).astype(np.float32) for _ in tables]

            def step(tables=tables, batches=batches, grads_out=grads_out):
                for table, batch, g in zip(tables, batches, grads_out):
                    _, ctx = ops.forward_bags(table, batch, micro_batch, save_intermediates=True)
                    ops.backward_bags(table, batch, ctx, g)

            cells.append((pooling, rank, step))
    for _ in range(warmup):
        for _, _, step in cells:
            step()
    secs = np.empty((len(cells), reps))
    for r in range(reps):
        for i, (_, _, step) in enumerate(cells):
            secs[i, r] = time_call(step, 1, 0)[0] * 1e6
    rows_out = []
    for (pooling, rank, _), cell in zip(cells, secs):
        lookups = batch_size * pooling * len(config.tables)
        per_sample = cell / batch_size
        per_lookup = cell / lookups
        rows_out.append(BenchRow(pooling, rank, batch_size, lookups, reps,
                                 float(per_sample.mean()), float(per_sample.std(ddof=1)) if reps > 1 else 0.0,
                                 float(per_lookup.mean()), float(per_lookup.std(ddof=1)) if reps > 1 else 0.0,
                                 median_of_means(per_lookup)))
    return rows_out


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    out = io.StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        d = asdict(row)
        out.write(",".join(f"{d[c]:.6g}" if isinstance(d[c], float) else str(d[c]) for c in CSV_COLUMNS) + "\n")
    return out.getvalue()


@dataclass
class BypassReport:
    tt_forward_rows: int
    tt_backward_rows: int
    hit_rate: float
    cached_us: float
    dense_us: float
    uncached_us: float


def bench_cache_bypass(num_rows: int = 10_000, emb_dim: int = 16, rank: int = 16, hot_rows: int = 64,
                       batch_size: int = 256, pooling: int = 10, reps: int = 30, seed: int = 0) -> BypassReport:
    """Scripted stream whose lookups all hit the cache.

    Every lookup is drawn from ``hot_rows`` rows that the warm-up makes
    resident, so the TT chain should see no traffic at all; the counters in
    :mod:`ttrec.ops` record whatever does reach it. The cached forward+backward
    time is reported next to a plain dense gather and the uncached TT path.
    """
    rng = np.random.default_rng(seed)
    plan = plan_shapes(num_rows, emb_dim, 3, rank)
    table = TtTable.zeros(plan, np.float32)
    init_tt_cores(table, InitSpec.sampled_gaussian(fan_in=emb_dim, rank_normalize=True), seed)
    hot = rng.choice(num_rows, size=hot_rows, replace=False)
    offsets = np.arange(0, batch_size * pooling + 1, pooling, dtype=np.int64)
    batch = IndexBatch(rng.choice(hot, size=batch_size * pooling), offsets)
    grad = rng.standard_normal((batch_size, emb_dim)).astype(np.float32)

    cache = LfuCache(hot_rows, emb_dim, np.float32)
    cache.freq.record(hot)
    cache.warmup_finalize(table)

    def cached_step():
        cached, tt_part = cache.record_and_partition(batch)
        cache.forward(cached)
        if tt_part.num_lookups:
            _, ctx = ops.forward_bags(table, tt_part)
            ops.backward_bags(table, tt_part, ctx, grad)
        cache.slot_gradients(cached, grad)

    ops.counters.reset()
    cached_t = time_call(cached_step, reps)
    fwd_rows, bwd_rows = ops.counters.forward_rows, ops.counters.backward_rows

    dense = np.ascontiguousarray(rng.standard_normal((num_rows, emb_dim)).astype(np.float32))

    def dense_step():
        ops.dense_embedding_bag(dense, batch)
        ops.dense_embedding_bag_grad(batch, grad, dense.dtype)

    def uncached_step():
        _, ctx = ops.forward_bags(table, batch)
        ops.backward_bags(table, batch, ctx, grad)

    dense_t = time_call(dense_step, reps)
    uncached_t = time_call(uncached_step, reps)
    return BypassReport(fwd_rows, bwd_rows, cache.hit_rate(), median_of_means(cached_t) * 1e6,
                        median_of_means(dense_t) * 1e6, median_of_means(uncached_t) * 1e6)
