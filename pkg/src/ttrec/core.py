"""TT-matrix representation of an embedding table.

A table of ``num_rows x emb_dim`` is reshaped into a 2d-way tensor whose
row index splits into digits ``(i_1..i_d)`` under radices ``m_k`` and whose
column index splits into ``(j_1..j_d)`` under radices ``n_k``. Each core
``k`` is a dense array of shape ``(R_{k-1}, m_k, n_k, R_k)``; entry
``(i, j)`` of the table is the product of the ``(R_{k-1}, R_k)`` slices
``core_k[:, i_k, j_k, :]`` taken left to right.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "KAGGLE_TABLES",
    "IndexOutOfRange",
    "PlanError",
    "ShapePlan",
    "TtTable",
    "decompose_index",
    "decompose_indices",
    "memory_reduction",
    "parameter_count",
    "plan_shapes",
    "reconstruct_full",
    "recompose_index",
]

# Largest Criteo Kaggle tables with their hand-picked row factorizations
# (embedding dim 16, column factors 2x2x4).
KAGGLE_TABLES: tuple[tuple[int, tuple[int, int, int]], ...] = (
    (10131227, (200, 220, 250)),
    (8351593, (200, 200, 209)),
    (7046547, (200, 200, 200)),
    (5461306, (166, 175, 188)),
    (2202608, (125, 130, 136)),
    (286181, (53, 72, 75)),
    (142572, (50, 52, 55)),
)
KAGGLE_COL_FACTORS = (2, 2, 4)

RECONSTRUCT_LIMIT = 10**7


class PlanError(ValueError):
    """Invalid table shape or factorization."""


class IndexOutOfRange(IndexError):
    """A row index does not address a row of the table."""


@dataclass(frozen=True)
class ShapePlan:
    num_rows: int
    emb_dim: int
    row_factors: tuple[int, ...]
    col_factors: tuple[int, ...]
    ranks: tuple[int, ...]

    def __post_init__(self):
        d = len(self.row_factors)
        if d < 2:
            raise PlanError(f"tt_dim must be >= 2, got {d}")
        if len(self.col_factors) != d:
            raise PlanError(f"{len(self.col_factors)} column factors for tt_dim {d}")
        if len(self.ranks) != d + 1:
            raise PlanError(f"expected {d + 1} ranks, got {len(self.ranks)}")
        if self.num_rows < 1 or self.emb_dim < 1:
            raise PlanError("num_rows and emb_dim must be positive")
        if any(f < 1 for f in self.row_factors + self.col_factors + self.ranks):
            raise PlanError("factors and ranks must be positive integers")
        if self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise PlanError(f"boundary ranks must be 1, got {self.ranks}")
        if math.prod(self.row_factors) < self.num_rows:
            raise PlanError(
                f"row factors {list(self.row_factors)} cover {math.prod(self.row_factors)} "
                f"rows < num_rows {self.num_rows}"
            )
        if math.prod(self.col_factors) != self.emb_dim:
            raise PlanError(
                f"column factors {list(self.col_factors)} multiply to "
                f"{math.prod(self.col_factors)}, not emb_dim {self.emb_dim}"
            )

    @property
    def tt_dim(self) -> int:
        return len(self.row_factors)

    @property
    def padded_rows(self) -> int:
        return math.prod(self.row_factors)

    @property
    def core_shapes(self) -> list[tuple[int, int, int, int]]:
        r, m, n = self.ranks, self.row_factors, self.col_factors
        return [(r[k], m[k], n[k], r[k + 1]) for k in range(self.tt_dim)]

    @property
    def parameter_count(self) -> int:
        return sum(math.prod(s) for s in self.core_shapes)

    @property
    def memory_reduction(self) -> int:
        # round half away from zero on an exact rational
        num, den = self.num_rows * self.emb_dim, self.parameter_count
        return (2 * num + den) // (2 * den)

    def to_dict(self) -> dict:
        return {
            "num_rows": self.num_rows,
            "emb_dim": self.emb_dim,
            "row_factors": list(self.row_factors),
            "col_factors": list(self.col_factors),
            "ranks": list(self.ranks),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ShapePlan":
        return cls(
            num_rows=int(data["num_rows"]),
            emb_dim=int(data["emb_dim"]),
            row_factors=tuple(int(v) for v in data["row_factors"]),
            col_factors=tuple(int(v) for v in data["col_factors"]),
            ranks=tuple(int(v) for v in data["ranks"]),
        )


def parameter_count(plan: ShapePlan) -> int:
    return plan.parameter_count


def memory_reduction(plan: ShapePlan) -> int:
    return plan.memory_reduction


def _balanced_row_factors(num_rows: int, d: int) -> tuple[int, ...]:
    """Smallest covering product with factors near ``num_rows ** (1/d)``.

    Every candidate has max/min <= 4. Ties on the product go to the smaller
    max/min ratio, then to lexicographic order of the ascending tuple.
    """
    if num_rows == 1:
        return (1,) * d
    root = num_rows ** (1.0 / d)
    best_key, best = None, None
    lo_min = max(1, math.floor(root / 2))
    lo_max = max(1, math.ceil(root))
    for lo in range(lo_min, lo_max + 1):
        hi = 4 * lo
        # enumerate nondecreasing prefixes starting at lo; last factor is forced
        stack = [((lo,), lo)]
        while stack:
            prefix, prod = stack.pop()
            if len(prefix) == d - 1:
                last = max(prefix[-1], -(-num_rows // prod))
                if last > hi:
                    continue
                tup = prefix + (last,)
                total = prod * last
                key = (total, tup[-1] / tup[0], tup)
                if best_key is None or key < best_key:
                    best_key, best = key, tup
                continue
            remaining = d - 1 - len(prefix)
            for f in range(prefix[-1], hi + 1):
                # even the largest completion must still reach num_rows
                if prod * f * hi**remaining < num_rows:
                    continue
                # prefix already at/over the best product: cannot improve
                if best_key is not None and prod * f * f**remaining > best_key[0]:
                    break
                stack.append((prefix + (f,), prod * f))
    if best is None:
        raise PlanError(f"no balanced {d}-way factorization found for {num_rows} rows")
    return best


def _balanced_col_factors(emb_dim: int, d: int) -> tuple[int, ...]:
    best_key, best = None, None
    divisors = [f for f in range(2, emb_dim + 1) if emb_dim % f == 0]

    def rec(prefix: tuple[int, ...], rest: int):
        nonlocal best_key, best
        if len(prefix) == d - 1:
            if rest >= 2 and (not prefix or rest >= prefix[-1]):
                tup = prefix + (rest,)
                key = (tup[-1] / tup[0], tup)
                if best_key is None or key < best_key:
                    best_key, best = key, tup
            return
        start = prefix[-1] if prefix else 2
        for f in divisors:
            if f >= start and rest % f == 0:
                rec(prefix + (f,), rest // f)

    rec((), emb_dim)
    if best is None:
        raise PlanError(f"emb_dim {emb_dim} cannot be split into {d} integer factors > 1")
    return best


def plan_shapes(
    num_rows: int,
    emb_dim: int,
    tt_dim: int = 3,
    rank: int = 16,
    row_factors: Sequence[int] | None = None,
    col_factors: Sequence[int] | None = None,
) -> ShapePlan:
    """Factorize a ``num_rows x emb_dim`` table into TT core shapes.

    Internal ranks are all ``rank``; boundary ranks are 1. Omitted row
    factors are chosen as near-balanced integers whose product is the
    smallest value >= ``num_rows``; omitted column factors are the most
    balanced exact factorization of ``emb_dim`` into factors > 1.
    """
    if rank < 1:
        raise PlanError(f"rank must be >= 1, got {rank}")
    if tt_dim < 2:
        raise PlanError(f"tt_dim must be >= 2, got {tt_dim}")
    if num_rows < 1 or emb_dim < 1:
        raise PlanError("num_rows and emb_dim must be positive")
    rows = tuple(int(f) for f in row_factors) if row_factors is not None else (
        _balanced_row_factors(num_rows, tt_dim)
    )
    cols = tuple(int(f) for f in col_factors) if col_factors is not None else (
        _balanced_col_factors(emb_dim, tt_dim)
    )
    if len(rows) != tt_dim or len(cols) != tt_dim:
        raise PlanError(
            f"expected {tt_dim} row and column factors, got {len(rows)} and {len(cols)}"
        )
    ranks = (1,) + (rank,) * (tt_dim - 1) + (1,)
    return ShapePlan(num_rows, emb_dim, rows, cols, ranks)


def _radix_strides(factors: Sequence[int]) -> np.ndarray:
    strides = np.ones(len(factors), dtype=np.int64)
    for k in range(len(factors) - 2, -1, -1):
        strides[k] = strides[k + 1] * factors[k + 1]
    return strides


def decompose_index(flat_index: int, row_factors: Sequence[int], table: str = "table") -> tuple[int, ...]:
    """Mixed-radix digits of ``flat_index``, most significant first."""
    total = math.prod(row_factors)
    if not 0 <= flat_index < total:
        raise IndexOutOfRange(f"{table}: index {flat_index} outside [0, {total})")
    digits = []
    for f in reversed(row_factors):
        flat_index, digit = divmod(flat_index, f)
        digits.append(digit)
    return tuple(reversed(digits))


def recompose_index(digits: Sequence[int], row_factors: Sequence[int]) -> int:
    flat = 0
    for digit, f in zip(digits, row_factors):
        flat = flat * f + int(digit)
    return flat


def decompose_indices(indices: np.ndarray, row_factors: Sequence[int]) -> np.ndarray:
    """Vectorized :func:`decompose_index`; returns an ``(L, d)`` int64 array."""
    idx = np.asarray(indices, dtype=np.int64)
    strides = _radix_strides(row_factors)
    return (idx[:, None] // strides[None, :]) % np.asarray(row_factors, dtype=np.int64)[None, :]


@dataclass
class TtTable:
    """TT-compressed embedding table.

    ``version`` increments on every in-place update so stale forward
    contexts can be detected.
    """

    plan: ShapePlan
    cores: list[np.ndarray]
    name: str = "table"
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        shapes = self.plan.core_shapes
        if len(self.cores) != len(shapes):
            raise PlanError(f"{len(self.cores)} cores for tt_dim {len(shapes)}")
        dtype = self.cores[0].dtype
        if dtype not in (np.float32, np.float64):
            raise TypeError(f"cores must be float32 or float64, got {dtype}")
        for k, (core, shape) in enumerate(zip(self.cores, shapes)):
            if core.shape != shape:
                raise PlanError(f"core {k} has shape {core.shape}, expected {shape}")
            if core.dtype != dtype:
                raise TypeError("all cores must share one dtype")
        self.cores = [np.ascontiguousarray(c) for c in self.cores]

    @classmethod
    def zeros(cls, plan: ShapePlan, dtype=np.float32, name: str = "table") -> "TtTable":
        return cls(plan, [np.zeros(s, dtype=dtype) for s in plan.core_shapes], name=name)

    @classmethod
    def full(cls, plan: ShapePlan, value: float, dtype=np.float32, name: str = "table") -> "TtTable":
        return cls(plan, [np.full(s, value, dtype=dtype) for s in plan.core_shapes], name=name)

    @property
    def dtype(self) -> np.dtype:
        return self.cores[0].dtype

    @property
    def num_rows(self) -> int:
        return self.plan.num_rows

    @property
    def emb_dim(self) -> int:
        return self.plan.emb_dim

    @property
    def parameter_count(self) -> int:
        return sum(c.size for c in self.cores)

    def core_slice(self, k: int, i: int) -> np.ndarray:
        """``core_k[:, i, :, :]`` as an ``(R_{k-1}, n_k * R_k)`` view."""
        r0, _, n, r1 = self.cores[k].shape
        return self.cores[k][:, i].reshape(r0, n * r1)

    def copy(self) -> "TtTable":
        return TtTable(self.plan, [c.copy() for c in self.cores], name=self.name)

    def astype(self, dtype) -> "TtTable":
        return TtTable(self.plan, [c.astype(dtype) for c in self.cores], name=self.name)

    def check_index(self, flat_index: int) -> None:
        if not 0 <= flat_index < self.plan.num_rows:
            raise IndexOutOfRange(
                f"{self.name}: index {flat_index} outside [0, {self.plan.num_rows})"
            )


def reconstruct_full(table: TtTable, limit: int = RECONSTRUCT_LIMIT) -> np.ndarray:
    """Dense ``(prod m_k) x N`` matrix represented by the cores.

    Contracts the full train with ``tensordot`` and then reorders axes, so it
    shares no code with the slice-chain lookup path. Meant for small tables.
    """
    plan = table.plan
    size = plan.padded_rows * plan.emb_dim
    if size > limit:
        raise MemoryError(f"dense reconstruction needs {size} elements > limit {limit}")
    d = plan.tt_dim
    acc = table.cores[0][0]  # (m1, n1, R1)
    for core in table.cores[1:]:
        acc = np.tensordot(acc, core, axes=([acc.ndim - 1], [0]))
    acc = acc[..., 0]  # axes (m1, n1, m2, n2, ..., md, nd)
    order = [2 * k for k in range(d)] + [2 * k + 1 for k in range(d)]
    return np.ascontiguousarray(acc.transpose(order)).reshape(plan.padded_rows, plan.emb_dim)

