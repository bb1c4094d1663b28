"""Least-frequently-used cache of uncompressed embedding rows.

Lifecycle: during warm-up every lookup goes to the TT cores while access
counts accumulate. ``warmup_finalize`` materializes the most frequent rows
from the cores, after which cached rows are read and trained as plain dense
rows. ``refresh`` periodically recomputes the hot set; newly admitted rows
start from their TT value and evicted rows lose whatever they learned.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import TtTable
from .freqtable import FreqTable
from .ops import IndexBatch, Pooling, lookup_rows

DEFAULT_CAPACITY_FRACTION = 1e-4  # 0.01% of the table rows


class CacheState(enum.Enum):
    WARMUP = "warmup"
    ACTIVE = "active"


def default_capacity(num_rows: int, fraction: float = DEFAULT_CAPACITY_FRACTION) -> int:
    return max(1, int(math.ceil(num_rows * fraction)))


@dataclass
class CachedPart:
    """Cached lookups of a batch, with indices replaced by cache slots."""

    batch: IndexBatch
    rows: np.ndarray  # original row index of every lookup


class LfuCache:
    def __init__(self, capacity_rows: int, emb_dim: int, dtype=np.float32,
                 refresh_period: int = 1000, decay: float | None = None):
        if capacity_rows < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity_rows = capacity_rows
        self.emb_dim = emb_dim
        self.row_store = np.zeros((capacity_rows, emb_dim), dtype=dtype)
        self.slot_rows = np.full(capacity_rows, -1, dtype=np.int64)  # slot -> row
        self.freq = FreqTable()
        self.state = CacheState.WARMUP
        self.refresh_period = refresh_period
        self.decay = decay
        self.hits = 0
        self.lookups = 0
        self._sorted_rows = np.empty(0, dtype=np.int64)
        self._sorted_slots = np.empty(0, dtype=np.int64)

    @classmethod
    def for_table(cls, table: TtTable, capacity_pct: float = 0.01, **kwargs) -> "LfuCache":
        """Cache sized as ``capacity_pct`` percent of the table rows."""
        capacity = default_capacity(table.num_rows, capacity_pct / 100.0)
        return cls(capacity, table.emb_dim, dtype=table.dtype, **kwargs)

    # ------------------------------------------------------------------ index

    def _reindex(self) -> None:
        resident = np.flatnonzero(self.slot_rows >= 0)
        rows = self.slot_rows[resident]
        order = np.argsort(rows, kind="stable")
        self._sorted_rows = rows[order]
        self._sorted_slots = resident[order]

    def cached_rows(self) -> np.ndarray:
        return np.sort(self.slot_rows[self.slot_rows >= 0])

    def slots_of(self, rows) -> np.ndarray:
        """Slot of each row, or -1 where the row is not resident."""
        rows = np.asarray(rows, dtype=np.int64)
        if len(self._sorted_rows) == 0:
            return np.full(rows.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_rows, rows)
        pos = np.minimum(pos, len(self._sorted_rows) - 1)
        hit = self._sorted_rows[pos] == rows
        return np.where(hit, self._sorted_slots[pos], -1)

    def __contains__(self, row: int) -> bool:
        return bool(self.slots_of(np.array([row]))[0] >= 0)

    def __len__(self) -> int:
        return len(self._sorted_rows)

    # -------------------------------------------------------------- lifecycle

    def record_and_partition(self, batch: IndexBatch) -> tuple[CachedPart, IndexBatch]:
        """Count every lookup and split the batch into cached and TT parts.

        Both parts keep the full bag structure (same number of bags, weights,
        pooling, and the original bag sizes as mean divisor), so their pooled
        outputs add up to the pooled output of ``batch``.
        """
        self.freq.record(batch.indices)
        slots = self.slots_of(batch.indices)
        in_cache = slots >= 0
        bag_ids = batch.bag_ids()
        divisor = batch.mean_divisor if batch.mean_divisor is not None else np.diff(batch.offsets)
        if self.state is CacheState.ACTIVE:
            self.hits += int(in_cache.sum())
            self.lookups += batch.num_lookups

        def part(mask, values):
            offsets = np.zeros(batch.num_bags + 1, dtype=np.int64)
            offsets[1:] = np.cumsum(np.bincount(bag_ids[mask], minlength=batch.num_bags))
            weights = None if batch.per_sample_weights is None else batch.per_sample_weights[mask]
            return IndexBatch(values[mask], offsets, weights, batch.pooling,
                              divisor if batch.pooling is Pooling.MEAN else None)

        cached = CachedPart(part(in_cache, slots), batch.indices[in_cache])
        return cached, part(~in_cache, batch.indices)

    def _materialize(self, table: TtTable, rows: np.ndarray, slots: np.ndarray) -> None:
        if len(rows):
            self.row_store[slots] = lookup_rows(table, rows)

    def warmup_finalize(self, table: TtTable) -> "LfuCache":
        if self.state is not CacheState.WARMUP:
            raise RuntimeError("cache already active")
        top = self.freq.top_k(self.capacity_rows)
        slots = np.arange(len(top), dtype=np.int64)
        self.slot_rows[:] = -1
        self.slot_rows[slots] = top
        self._materialize(table, top, slots)
        self._reindex()
        self.state = CacheState.ACTIVE
        return self

    def refresh(self, table: TtTable) -> "LfuCache":
        """Recompute the hot set; retained rows keep their learned values."""
        if self.state is not CacheState.ACTIVE:
            raise RuntimeError("refresh requires an active cache")
        top = self.freq.top_k(self.capacity_rows)
        keep = self.slots_of(top) >= 0
        evict = np.isin(self.slot_rows, top, invert=True) & (self.slot_rows >= 0)
        self.slot_rows[evict] = -1
        self.row_store[evict] = 0
        admitted = top[~keep]
        free = np.flatnonzero(self.slot_rows < 0)[: len(admitted)]
        self.slot_rows[free] = admitted
        self._materialize(table, admitted, free)
        self._reindex()
        if self.decay is not None:
            self.freq.decay(self.decay)
        return self

    # ---------------------------------------------------------- compute paths

    def forward(self, cached: CachedPart) -> np.ndarray:
        batch = cached.batch
        out = np.zeros((batch.num_bags, self.emb_dim), dtype=self.row_store.dtype)
        if batch.num_lookups:
            rows = np.ascontiguousarray(self.row_store[batch.indices])
            kernels.segment_accumulate(rows, batch.bag_ids(), batch.coefficients(out.dtype), out)
        return out

    def slot_gradients(self, cached: CachedPart, grad_output: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``capacity x N`` gradient and the mask of touched slots."""
        batch = cached.batch
        dtype = self.row_store.dtype
        grads = np.zeros_like(self.row_store)
        touched = np.zeros(self.capacity_rows, dtype=bool)
        if batch.num_lookups:
            grad_output = np.ascontiguousarray(grad_output, dtype=dtype)
            per_lookup = kernels.gather_scaled(grad_output, batch.bag_ids(), batch.coefficients(dtype))
            kernels.segment_accumulate(per_lookup, batch.indices, np.ones(batch.num_lookups, dtype=dtype), grads)
            touched[batch.indices] = True
        return grads, touched

    def cached_sgd_update(self, slot_grads: np.ndarray, lr: float, touched: np.ndarray | None = None) -> "LfuCache":
        """Plain SGD on resident rows: ``row -= lr * grad``."""
        if slot_grads.shape != self.row_store.shape:
            raise ValueError(f"slot gradient shape {slot_grads.shape} != {self.row_store.shape}")
        if touched is None:
            touched = np.any(slot_grads != 0, axis=1)
        bad = np.flatnonzero(touched & (self.slot_rows < 0))
        if len(bad):
            raise KeyError(f"slot {int(bad[0])} is not resident")
        idx = np.flatnonzero(touched)
        self.row_store[idx] -= np.asarray(lr, dtype=self.row_store.dtype) * slot_grads[idx]
        return self

    # ---------------------------------------------------------------- metrics

    def hit_rate(self) -> float:
        if self.lookups == 0:
            return 0.0
        return self.hits / self.lookups


def _top_set(counts, k: int) -> np.ndarray:
    if isinstance(counts, FreqTable):
        return counts.top_k(k)
    counts = np.asarray(counts)
    present = np.flatnonzero(counts > 0)
    order = np.lexsort((present, -counts[present]))
    return present[order][:k]


def hot_set_drift(window_counts, k: int) -> np.ndarray:
    """Fraction of the top-``k`` set replaced between consecutive windows.

    Each element of ``window_counts`` is a dense count array or a
    :class:`FreqTable` snapshot. Returns ``|A symdiff B| / (2k)`` per pair.
    """
    if k < 1:
        raise ValueError("k must be positive")
    sets = [set(_top_set(c, k).tolist()) for c in window_counts]
    return np.array([len(a ^ b) / (2 * k) for a, b in zip(sets, sets[1:])])
