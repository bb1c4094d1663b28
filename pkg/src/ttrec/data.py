"""Training data: Zipfian synthetic batches and Criteo-format ingestion."""
from __future__ import annotations

import hashlib
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .ops import IndexBatch, Pooling

log = logging.getLogger(__name__)

CRITEO_DENSE = 13
CRITEO_CATEGORICAL = 26
CRITEO_FIELDS = 1 + CRITEO_DENSE + CRITEO_CATEGORICAL


@dataclass
class Batch:
    dense: np.ndarray                 # (B, F)
    sparse: list[IndexBatch]          # one per categorical table
    labels: np.ndarray                # (B,) in {0, 1}

    @property
    def size(self) -> int:
        return len(self.labels)


# ----------------------------------------------------------------- zipfian


@lru_cache(maxsize=64)
def _zipf_cdf(rows: int, s: float) -> np.ndarray:
    weights = np.arange(1, rows + 1, dtype=np.float64) ** -s
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return cdf


def zipf_probabilities(rows: int, s: float) -> np.ndarray:
    """P(index = i) proportional to ``(i + 1) ** -s`` on ``[0, rows)``."""
    w = np.arange(1, rows + 1, dtype=np.float64) ** -s
    return w / w.sum()


def sample_zipf(rng: np.random.Generator, rows: int, s: float, size) -> np.ndarray:
    """Row indices with index 0 the most popular; ``s == 0`` is uniform."""
    if s < 0:
        raise ValueError("zipf exponent must be non-negative")
    if s == 0:
        return rng.integers(0, rows, size=size, dtype=np.int64)
    cdf = _zipf_cdf(rows, float(s))
    idx = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(idx, rows - 1).astype(np.int64)


@dataclass
class PlantedTeacher:
    """Linear-logit labeller: ``logit = w . x + sum_t mean_bag(u_t)``.

    Only the ``hot_rows`` most popular rows of each table carry an effect,
    so the labels are a deterministic function of features a model can see
    often enough to learn.
    """

    dense_weights: np.ndarray
    row_effects: list[np.ndarray]
    bias: float = 0.0

    @classmethod
    def random(cls, rng: np.random.Generator, num_dense: int, table_sizes: Sequence[int],
               hot_rows: int = 32, dense_scale: float = 1.0, cat_scale: float = 1.0) -> "PlantedTeacher":
        w = dense_scale * rng.standard_normal(num_dense)
        effects = []
        for rows in table_sizes:
            u = np.zeros(rows)
            h = min(hot_rows, rows)
            u[:h] = cat_scale * rng.standard_normal(h)
            effects.append(u)
        return cls(w, effects)

    def logits(self, dense: np.ndarray, sparse: Sequence[IndexBatch]) -> np.ndarray:
        z = dense @ self.dense_weights + self.bias
        for u, batch in zip(self.row_effects, sparse):
            pooled = np.zeros(batch.num_bags)
            np.add.at(pooled, batch.bag_ids(), u[batch.indices])
            z += pooled / np.maximum(np.diff(batch.offsets), 1)
        return z


def generate_zipfian_batch(rng: np.random.Generator, table_sizes: Sequence[int], s: float,
                           batch_size: int, pooling_factor: int = 1, num_dense: int = 3,
                           teacher: PlantedTeacher | None = None,
                           pooling: Pooling = Pooling.SUM) -> Batch:
    """One batch: ``pooling_factor`` Zipf(s) draws per sample and table."""
    if s < 0:
        raise ValueError("s must be non-negative")
    if pooling_factor < 1:
        raise ValueError("pooling factor must be >= 1")
    dense = rng.standard_normal((batch_size, num_dense))
    offsets = np.arange(0, batch_size * pooling_factor + 1, pooling_factor, dtype=np.int64)
    sparse = [
        IndexBatch(sample_zipf(rng, rows, s, batch_size * pooling_factor), offsets, pooling=pooling)
        for rows in table_sizes
    ]
    if teacher is None:
        labels = np.zeros(batch_size)
    else:
        labels = (teacher.logits(dense, sparse) > 0).astype(np.float64)
    return Batch(dense, sparse, labels)


class SyntheticSource:
    """Endless stream of planted-teacher batches from one seed."""

    def __init__(self, table_sizes: Sequence[int], batch_size: int, seed: int = 0, s: float = 1.05,
                 pooling_factor: int = 1, num_dense: int = 3, hot_rows: int = 32,
                 dense_scale: float = 1.0, cat_scale: float = 1.0):
        self.table_sizes = list(table_sizes)
        self.batch_size = batch_size
        self.s = s
        self.pooling_factor = pooling_factor
        self.num_dense = num_dense
        teacher_rng = np.random.default_rng([seed, 1])
        self.teacher = PlantedTeacher.random(teacher_rng, num_dense, self.table_sizes, hot_rows,
                                             dense_scale, cat_scale)
        self.rng = np.random.default_rng([seed, 2])

    def next_batch(self, batch_size: int | None = None, rng: np.random.Generator | None = None) -> Batch:
        return generate_zipfian_batch(rng or self.rng, self.table_sizes, self.s,
                                      batch_size or self.batch_size, self.pooling_factor,
                                      self.num_dense, self.teacher)

    def holdout(self, num_samples: int, seed: int = 12345) -> Batch:
        """Evaluation batch from an independent stream (same teacher)."""
        return self.next_batch(num_samples, np.random.default_rng([seed, 3]))

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield self.next_batch()


def prefetch(source: Iterator[Batch], depth: int = 2) -> Iterator[Batch]:
    """Produce batches one thread ahead through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def producer():
        try:
            for item in source:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        finally:
            while not stop.is_set():
                try:
                    q.put(done, timeout=0.1)
                    break
                except queue.Full:
                    continue

    thread = threading.Thread(target=producer, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            yield item
    finally:
        stop.set()


# ------------------------------------------------------------------ criteo


class CriteoFormatError(ValueError):
    pass


@dataclass
class CriteoRecord:
    label: int
    dense: np.ndarray        # (13,) float64, log(1 + max(x, 0))
    categorical: np.ndarray  # (26,) int64 hashed indices


def hash_token(token: str, column: int, hash_size: int) -> int:
    """Stable bucket in ``[1, hash_size)``; bucket 0 is reserved for missing."""
    if hash_size < 2:
        return 0
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             person=f"col{column}".encode()).digest()
    return 1 + int.from_bytes(digest, "little") % (hash_size - 1)


@dataclass
class CriteoStream:
    """Iterates over a Criteo TSV/CSV file; ``skipped`` counts malformed rows."""

    path: Path
    hash_sizes: Sequence[int]
    skipped: int = 0
    delimiter: str | None = None
    _warned: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        self.path = Path(self.path)
        if len(self.hash_sizes) != CRITEO_CATEGORICAL:
            raise ValueError(f"need {CRITEO_CATEGORICAL} hash sizes, got {len(self.hash_sizes)}")

    def _parse(self, fields: list[str]) -> CriteoRecord:
        label = int(fields[0])
        if label not in (0, 1):
            raise ValueError(f"label {label} not in {{0, 1}}")
        dense = np.zeros(CRITEO_DENSE)
        for k, raw in enumerate(fields[1:1 + CRITEO_DENSE]):
            raw = raw.strip()
            if raw:
                dense[k] = math.log1p(max(float(raw), 0.0))
        cats = np.zeros(CRITEO_CATEGORICAL, dtype=np.int64)
        for k, tok in enumerate(fields[1 + CRITEO_DENSE:]):
            tok = tok.strip()
            if tok:
                cats[k] = hash_token(tok, k, self.hash_sizes[k])
        return CriteoRecord(label, dense, cats)

    def __iter__(self) -> Iterator[CriteoRecord]:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line:
                    continue
                if self.delimiter is None:
                    self.delimiter = "\t" if "\t" in line else ","
                fields = line.split(self.delimiter)
                if len(fields) != CRITEO_FIELDS:
                    raise CriteoFormatError(
                        f"{self.path}:{lineno}: expected {CRITEO_FIELDS} columns, got {len(fields)}"
                    )
                try:
                    yield self._parse(fields)
                except ValueError as exc:
                    self.skipped += 1
                    log.warning("%s:%d: skipping malformed row (%s)", self.path, lineno, exc)


def ingest_criteo_csv(path, hash_sizes: Sequence[int]) -> CriteoStream:
    return CriteoStream(Path(path), list(hash_sizes))


def criteo_batches(records: Iterator[CriteoRecord], batch_size: int,
                   negative_keep: float | None = None, seed: int = 0) -> Iterator[Batch]:
    """Group records into model batches (one lookup per table and sample).

    ``negative_keep`` keeps each negative sample with that probability.
    """
    rng = np.random.default_rng(seed)
    buf: list[CriteoRecord] = []

    def emit():
        dense = np.stack([r.dense for r in buf])
        cats = np.stack([r.categorical for r in buf])
        offsets = np.arange(len(buf) + 1, dtype=np.int64)
        sparse = [IndexBatch(cats[:, t], offsets) for t in range(cats.shape[1])]
        return Batch(dense, sparse, np.array([r.label for r in buf], dtype=np.float64))

    for rec in records:
        if negative_keep is not None and rec.label == 0 and rng.random() >= negative_keep:
            continue
        buf.append(rec)
        if len(buf) == batch_size:
            yield emit()
            buf = []
    if buf:
        yield emit()
