"""Embedding-bag forward/backward over a :class:`~ttrec.core.TtTable`.

Lookups are processed in micro-batches of at most ``B`` rows. For each
micro-batch the chained slice products are evaluated for all rows at once
(``kernels.forward_levels``) and the rows are then reduced into their bags.
"""
from __future__ import annotations

import enum
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .core import IndexOutOfRange, TtTable, decompose_indices

DEFAULT_MICRO_BATCH = 2048


class Pooling(enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class IndexBatch:
    """CSR lookup request: bag ``b`` owns ``indices[offsets[b]:offsets[b+1]]``.

    ``mean_divisor`` overrides the per-bag divisor used by mean pooling; it is
    set when a batch is split into partial batches whose pooled outputs must
    still add up to the pooled output of the whole batch.
    """

    indices: np.ndarray
    offsets: np.ndarray
    per_sample_weights: np.ndarray | None = None
    pooling: Pooling = Pooling.SUM
    mean_divisor: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64).reshape(-1)
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.int64).reshape(-1)
        if self.per_sample_weights is not None:
            self.per_sample_weights = np.ascontiguousarray(self.per_sample_weights).reshape(-1)
        self.pooling = Pooling(self.pooling)
        if len(self.offsets) < 1 or self.offsets[0] != 0:
            raise ValueError("offsets must start with 0")
        if self.offsets[-1] != len(self.indices):
            raise ValueError(
                f"offsets end at {self.offsets[-1]} but there are {len(self.indices)} indices"
            )
        if np.any(np.diff(self.offsets) < 0):
            raise ValueError("offsets must be nondecreasing")
        if self.per_sample_weights is not None and len(self.per_sample_weights) != len(self.indices):
            raise ValueError(
                f"{len(self.per_sample_weights)} per-sample weights for {len(self.indices)} indices"
            )
        if self.mean_divisor is not None:
            self.mean_divisor = np.asarray(self.mean_divisor, dtype=np.int64).reshape(-1)
            if len(self.mean_divisor) != self.num_bags:
                raise ValueError("mean_divisor needs one entry per bag")

    @classmethod
    def from_bags(cls, bags: Sequence[Sequence[int]], weights: Sequence[Sequence[float]] | None = None,
                  pooling: Pooling | str = Pooling.SUM) -> "IndexBatch":
        offsets = np.zeros(len(bags) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(b) for b in bags])
        indices = np.array([i for b in bags for i in b], dtype=np.int64)
        w = None
        if weights is not None:
            w = np.array([x for ws in weights for x in ws], dtype=np.float64)
        return cls(indices, offsets, w, Pooling(pooling))

    @property
    def num_bags(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_lookups(self) -> int:
        return len(self.indices)

    def bag_ids(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Owning bag of each lookup in ``[start, stop)``."""
        stop = self.num_lookups if stop is None else stop
        return self.bags_at(np.arange(start, stop, dtype=np.int64))

    def bags_at(self, positions: np.ndarray) -> np.ndarray:
        """Owning bag of each lookup position."""
        return np.searchsorted(self.offsets, positions, side="right") - 1

    def coefficients(self, dtype, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Per-lookup scale: weight, divided by the bag size under mean pooling."""
        stop = self.num_lookups if stop is None else stop
        return self.coefficients_at(dtype, np.arange(start, stop, dtype=np.int64))

    def coefficients_at(self, dtype, positions: np.ndarray) -> np.ndarray:
        if self.per_sample_weights is None:
            coeff = np.ones(len(positions), dtype=dtype)
        else:
            coeff = self.per_sample_weights[positions].astype(dtype)
        if self.pooling is Pooling.MEAN:
            bags = self.bags_at(positions)
            if self.mean_divisor is not None:
                sizes = self.mean_divisor[bags]
            else:
                sizes = self.offsets[bags + 1] - self.offsets[bags]
            coeff /= np.maximum(sizes, 1).astype(dtype)
        return coeff

    def signature(self) -> int:
        crc = zlib.crc32(self.indices)
        crc = zlib.crc32(self.offsets, crc)
        if self.per_sample_weights is not None:
            crc = zlib.crc32(np.ascontiguousarray(self.per_sample_weights), crc)
        return crc


@dataclass
class Counters:
    """Rows pushed through the TT chain; lets tests prove a path was bypassed."""

    forward_rows: int = 0
    backward_rows: int = 0

    def reset(self) -> None:
        self.forward_rows = 0
        self.backward_rows = 0


counters = Counters()


@dataclass
class ForwardContext:
    """What backward needs from forward.

    ``levels`` holds the partial products of every row in ``plan.rows`` when
    they were saved, otherwise ``None`` and backward recomputes them one
    micro-batch of rows at a time.
    """

    micro_batch: int
    table_version: int
    table_id: int
    batch_signature: int
    num_lookups: int
    plan: "RowPlan"
    levels: list[np.ndarray] | None = None

    @property
    def dedup(self) -> bool:
        return self.plan.starts is not None

    @property
    def saved(self) -> bool:
        return self.levels is not None


@dataclass
class CoreGradients:
    grads: list[np.ndarray]

    @classmethod
    def zeros_like(cls, table: TtTable) -> "CoreGradients":
        return cls([np.zeros_like(c) for c in table.cores])

    def __getitem__(self, k: int) -> np.ndarray:
        return self.grads[k]

    def __len__(self) -> int:
        return len(self.grads)

    def __iadd__(self, other: "CoreGradients") -> "CoreGradients":
        for g, o in zip(self.grads, other.grads):
            g += o
        return self


def _validate(table: TtTable, batch: IndexBatch) -> None:
    bad = np.flatnonzero((batch.indices < 0) | (batch.indices >= table.num_rows))
    if len(bad):
        pos = int(bad[0])
        bag = int(np.searchsorted(batch.offsets, pos, side="right") - 1)
        raise IndexOutOfRange(
            f"{table.name}: index {int(batch.indices[pos])} at position {pos} (bag {bag}) "
            f"outside [0, {table.num_rows})"
        )


def _chunks(n: int, micro_batch: int) -> list[tuple[int, int]]:
    if micro_batch < 1:
        raise ValueError(f"micro-batch size must be >= 1, got {micro_batch}")
    return [(s, min(s + micro_batch, n)) for s in range(0, n, micro_batch)]


@dataclass
class RowPlan:
    """Which rows go through the TT chain, and which lookups use each one.

    Without dedup every lookup is its own row. With dedup ``rows`` are the
    distinct indices in ascending order and ``order`` lists lookup positions
    grouped by row (stable, so ties keep batch order); the lookups of
    ``rows[u]`` are ``order[starts[u]:starts[u + 1]]``.
    """

    rows: np.ndarray
    starts: np.ndarray | None = None  # None: one lookup per row, in batch order
    order: np.ndarray | None = None

    @classmethod
    def build(cls, indices: np.ndarray, dedup: bool) -> "RowPlan":
        n = len(indices)
        if not dedup:
            return cls(indices)
        if n == 0:
            return cls(indices, np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64))
        order = np.argsort(indices, kind="stable")
        grouped = indices[order]
        starts = np.flatnonzero(grouped[1:] != grouped[:-1]) + 1
        starts = np.concatenate([[0], starts, [n]]).astype(np.int64)
        return cls(grouped[starts[:-1]], starts, order)

    def lookup_spans(self, s: int, e: int, micro_batch: int):
        """``(positions, local_row)`` pieces of at most ``micro_batch`` lookups
        covering rows ``[s, e)``, in grouped order."""
        if self.starts is None:
            for a in range(s, e, micro_batch):
                positions = np.arange(a, min(a + micro_batch, e), dtype=np.int64)
                yield positions, positions - s
            return
        lo, hi = int(self.starts[s]), int(self.starts[e])
        for a in range(lo, hi, micro_batch):
            b = min(a + micro_batch, hi)
            local = np.searchsorted(self.starts, np.arange(a, b, dtype=np.int64), side="right") - 1 - s
            yield self.order[a:b], local


def lookup_rows(table: TtTable, indices: np.ndarray, micro_batch: int = DEFAULT_MICRO_BATCH) -> np.ndarray:
    """Embedding rows for ``indices`` as an ``(L, N)`` array."""
    idx = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1)
    batch = IndexBatch(idx, np.arange(len(idx) + 1))
    _validate(table, batch)
    out = np.empty((len(idx), table.emb_dim), dtype=table.dtype)
    for s, e in _chunks(len(idx), micro_batch):
        digits = decompose_indices(idx[s:e], table.plan.row_factors)
        out[s:e] = kernels.forward_levels(table.cores, digits)[-1]
    counters.forward_rows += len(idx)
    return out


def lookup_row(table: TtTable, flat_index: int) -> np.ndarray:
    table.check_index(int(flat_index))
    return lookup_rows(table, np.array([flat_index]))[0]


def forward_bags(
    table: TtTable,
    batch: IndexBatch,
    micro_batch: int = DEFAULT_MICRO_BATCH,
    save_intermediates: bool = False,
    workers: int = 1,
    dedup: bool = True,
) -> tuple[np.ndarray, ForwardContext]:
    """Pooled embeddings, one row per bag, plus the context for backward.

    With ``dedup`` the TT chain runs once per distinct row of the whole
    batch; rows are processed ``micro_batch`` at a time and their lookups
    are reduced into bags in grouped order, so the result does not depend
    on ``micro_batch`` or ``workers``.
    """
    _validate(table, batch)
    n = batch.num_lookups
    dtype = table.dtype
    out = np.zeros((batch.num_bags, table.emb_dim), dtype=dtype)
    plan = RowPlan.build(batch.indices, dedup)
    ctx = ForwardContext(micro_batch, table.version, id(table), batch.signature(), n, plan)
    chunks = _chunks(len(plan.rows), micro_batch)
    if save_intermediates:
        ctx.levels = [np.empty((len(plan.rows), s), dtype=dtype) for s in kernels.level_sizes(table.cores)]
    if n == 0:
        return out, ctx

    def compute(span):
        s, e = span
        digits = decompose_indices(plan.rows[s:e], table.plan.row_factors)
        levels = None if ctx.levels is None else [lv[s:e] for lv in ctx.levels]
        return kernels.forward_levels(table.cores, digits, levels)[-1]

    def reduce(span, rows):
        for positions, local in plan.lookup_spans(span[0], span[1], micro_batch):
            kernels.segment_accumulate(np.ascontiguousarray(rows[local]), batch.bags_at(positions),
                                       batch.coefficients_at(dtype, positions), out)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            # reduce in chunk order so the result does not depend on scheduling
            for span, rows in zip(chunks, pool.map(compute, chunks)):
                reduce(span, rows)
    else:
        for span in chunks:
            reduce(span, compute(span))
    counters.forward_rows += n
    return out, ctx


def backward_bags(
    table: TtTable,
    batch: IndexBatch,
    ctx: ForwardContext,
    grad_output: np.ndarray,
    workers: int = 1,
) -> CoreGradients:
    """Gradients of the loss with respect to every core."""
    if (ctx.table_id != id(table) or ctx.table_version != table.version
            or ctx.batch_signature != batch.signature() or ctx.num_lookups != batch.num_lookups):
        raise ValueError("forward context does not match this table state and batch")
    grad_output = np.asarray(grad_output)
    if grad_output.shape != (batch.num_bags, table.emb_dim):
        raise ValueError(
            f"grad_output shape {grad_output.shape} != {(batch.num_bags, table.emb_dim)}"
        )
    grad_output = np.ascontiguousarray(grad_output, dtype=table.dtype)
    n = batch.num_lookups
    grads = CoreGradients.zeros_like(table)
    if n == 0:
        return grads
    plan = ctx.plan
    chunks = _chunks(len(plan.rows), ctx.micro_batch)
    dtype = table.dtype

    def run(spans, target: CoreGradients):
        for s, e in spans:
            digits = decompose_indices(plan.rows[s:e], table.plan.row_factors)
            if ctx.levels is not None:
                levels = [lv[s:e] for lv in ctx.levels]
            else:
                levels = kernels.forward_levels(table.cores, digits)
            # fold the gradients of every lookup onto its row, in grouped order
            row_grads = np.zeros((e - s, table.emb_dim), dtype=dtype)
            for positions, local in plan.lookup_spans(s, e, ctx.micro_batch):
                per_lookup = kernels.gather_scaled(grad_output, batch.bags_at(positions),
                                                   batch.coefficients_at(dtype, positions))
                kernels.segment_accumulate(per_lookup, local, np.ones(len(local), dtype=dtype), row_grads)
            kernels.backward_accumulate(table.cores, digits, levels, row_grads, target.grads)
        return target

    workers = max(1, min(workers, len(chunks)))
    if workers == 1:
        run(chunks, grads)
    else:
        parts = np.array_split(np.arange(len(chunks)), workers)
        with ThreadPoolExecutor(workers) as pool:
            futures = [
                pool.submit(run, [chunks[i] for i in part], CoreGradients.zeros_like(table))
                for part in parts
            ]
            # merge private buffers in worker order
            for fut in futures:
                grads += fut.result()
    counters.backward_rows += n
    return grads


def sgd_step(table: TtTable, grads: CoreGradients, lr: float) -> TtTable:
    if len(grads) != len(table.cores):
        raise ValueError("gradient list does not match the table cores")
    for core, g in zip(table.cores, grads.grads):
        if g.shape != core.shape:
            raise ValueError(f"gradient shape {g.shape} != core shape {core.shape}")
        core -= np.asarray(lr, dtype=core.dtype) * g
    table.version += 1
    return table


def dense_embedding_bag(weight: np.ndarray, batch: IndexBatch) -> np.ndarray:
    """Embedding-bag pooling over an explicit dense matrix."""
    out = np.zeros((batch.num_bags, weight.shape[1]), dtype=weight.dtype)
    if batch.num_lookups:
        kernels.segment_accumulate(
            np.ascontiguousarray(weight[batch.indices]), batch.bag_ids(),
            batch.coefficients(weight.dtype), out,
        )
    return out


def dense_embedding_bag_grad(batch: IndexBatch, grad_output: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Unique touched rows and their summed gradients for a dense table."""
    grad_output = np.ascontiguousarray(grad_output, dtype=dtype)
    rows = kernels.gather_scaled(grad_output, batch.bag_ids(), batch.coefficients(dtype))
    uniq, inverse = np.unique(batch.indices, return_inverse=True)
    summed = np.zeros((len(uniq), grad_output.shape[1]), dtype=dtype)
    kernels.segment_accumulate(rows, inverse.astype(np.int64), np.ones(len(rows), dtype=dtype), summed)
    return uniq, summed
