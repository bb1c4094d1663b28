"""Open-addressing hash table counting row accesses.

Power-of-two slot count, linear probing, 64-bit multiplicative (Fibonacci)
hashing, grow-by-doubling once the load factor would exceed 0.7. Keys are
non-negative row indices; ``-1`` marks an empty slot.
"""
from __future__ import annotations

import numpy as np

from ._backend import njit, use_numba

EMPTY = -1
MAX_LOAD = 0.7
_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


@njit(cache=True)
def _slot_nb(key, shift):
    h = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    return np.int64(h >> np.uint64(shift))


@njit(cache=True)
def _record_nb(keys, counts, indices, size, limit, shift):
    # returns (number of indices consumed, new size); stops early when full
    mask = keys.shape[0] - 1
    for t in range(indices.shape[0]):
        key = indices[t]
        s = _slot_nb(key, shift)
        while True:
            k = keys[s]
            if k == key:
                counts[s] += 1
                break
            if k == -1:
                if size + 1 > limit:
                    return t, size
                keys[s] = key
                counts[s] = 1
                size += 1
                break
            s = (s + 1) & mask
    return indices.shape[0], size


@njit(cache=True)
def _find_nb(keys, counts, queries, shift, out):
    mask = keys.shape[0] - 1
    for t in range(queries.shape[0]):
        key = queries[t]
        s = _slot_nb(key, shift)
        out[t] = 0
        while True:
            k = keys[s]
            if k == key:
                out[t] = counts[s]
                break
            if k == -1:
                break
            s = (s + 1) & mask


def _slot_py(key: int, shift: int) -> int:
    return ((key * _GOLDEN) & _MASK64) >> shift


def _record_py(keys, counts, indices, size, limit, shift):
    mask = len(keys) - 1
    for t, key in enumerate(indices.tolist()):
        s = _slot_py(key, shift)
        while True:
            k = keys[s]
            if k == key:
                counts[s] += 1
                break
            if k == EMPTY:
                if size + 1 > limit:
                    return t, size
                keys[s] = key
                counts[s] = 1
                size += 1
                break
            s = (s + 1) & mask
    return len(indices), size


def _find_py(keys, counts, queries, shift, out):
    mask = len(keys) - 1
    for t, key in enumerate(queries.tolist()):
        s = _slot_py(key, shift)
        out[t] = 0
        while True:
            k = keys[s]
            if k == key:
                out[t] = counts[s]
                break
            if k == EMPTY:
                break
            s = (s + 1) & mask


class FreqTable:
    """Access counts keyed by row index."""

    def __init__(self, capacity: int = 1024):
        slots = 1
        while slots < max(capacity, 2):
            slots *= 2
        self._alloc(slots)

    def _alloc(self, slots: int) -> None:
        self.keys = np.full(slots, EMPTY, dtype=np.int64)
        self.counts = np.zeros(slots, dtype=np.int64)
        self.size = 0
        self._shift = 64 - (slots.bit_length() - 1)

    @property
    def capacity(self) -> int:
        return len(self.keys)

    @property
    def load_factor(self) -> float:
        return self.size / self.capacity

    @property
    def _limit(self) -> int:
        return int(MAX_LOAD * self.capacity)

    def __len__(self) -> int:
        return self.size

    def _grow(self) -> None:
        keys, counts = self.items()
        self._alloc(self.capacity * 2)
        self._insert_counts(keys, counts)

    def _insert_counts(self, keys: np.ndarray, counts: np.ndarray) -> None:
        # bulk re-insert used by grow/decay; keys are unique
        mask = self.capacity - 1
        for key, count in zip(keys.tolist(), counts.tolist()):
            s = _slot_py(key, self._shift)
            while self.keys[s] != EMPTY:
                s = (s + 1) & mask
            self.keys[s] = key
            self.counts[s] = count
            self.size += 1

    def record(self, indices) -> None:
        """Increment the count of every index (repeats count repeatedly)."""
        idx = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1)
        if len(idx) and idx.min() < 0:
            raise ValueError("row indices must be non-negative")
        kernel = _record_nb if use_numba() else _record_py
        while len(idx):
            done, self.size = kernel(self.keys, self.counts, idx, self.size, self._limit, self._shift)
            done = int(done)
            idx = idx[done:]
            if len(idx):
                self._grow()

    def get(self, indices) -> np.ndarray:
        q = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1)
        out = np.empty(len(q), dtype=np.int64)
        (_find_nb if use_numba() else _find_py)(self.keys, self.counts, q, self._shift, out)
        return out

    def __getitem__(self, key: int) -> int:
        return int(self.get([key])[0])

    def items(self) -> tuple[np.ndarray, np.ndarray]:
        """Present keys and counts ordered by (count desc, index asc)."""
        occupied = self.keys != EMPTY
        keys, counts = self.keys[occupied], self.counts[occupied]
        order = np.lexsort((keys, -counts))
        return keys[order], counts[order]

    def top_k(self, k: int) -> np.ndarray:
        keys, _ = self.items()
        return keys[:k]

    def total(self) -> int:
        return int(self.counts.sum())

    def decay(self, factor: float) -> None:
        """Scale counts by ``factor`` (floored); keys reaching zero are dropped."""
        if not 0 <= factor <= 1:
            raise ValueError("decay factor must lie in [0, 1]")
        keys, counts = self.items()
        counts = np.floor(counts * factor).astype(np.int64)
        keep = counts > 0
        self._alloc(self.capacity)
        self._insert_counts(keys[keep], counts[keep])

    def dense(self, num_rows: int) -> np.ndarray:
        out = np.zeros(num_rows, dtype=np.int64)
        keys, counts = self.items()
        out[keys] = counts
        return out
