"""Weight initialization for TT cores and dense tables.

The reference target for an uncompressed table with fan-in ``n`` is
``Uniform(-1/sqrt(n), 1/sqrt(n))``; the Gaussian closest to it in KL
divergence is ``N(0, 1/(3n))``. Sampled-Gaussian core initialization draws
standard normals, rejects small magnitudes, and rescales so that a product
of ``d`` entries (one per core) has a chosen second moment.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import TtTable

MAX_REDRAWS = 10_000


class InitKind(enum.Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    SAMPLED_GAUSSIAN = "sampled"


class Scaling(enum.Enum):
    PAPER_LITERAL = "paper-literal"
    RECIPROCAL = "reciprocal"
    MOMENT_CORRECTED = "moment-corrected"


@dataclass(frozen=True)
class InitSpec:
    """How to draw core (or dense-table) entries.

    ``a``/``b`` parametrize Uniform, ``mu``/``sigma2`` Gaussian. For the
    sampled Gaussian, ``target_sigma2`` defaults to ``1/(3 * fan_in)``;
    ``one_sided`` keeps only ``x > threshold`` instead of ``|x| > threshold``;
    ``rank_normalize`` additionally divides by ``(R_{k-1} R_k) ** 0.25`` per core so
    that entries of the reconstructed table (sums over rank paths) rather than
    single products hit the target moment.
    """

    kind: InitKind
    fan_in: int = 16
    a: float = 0.0
    b: float = 1.0
    mu: float = 0.0
    sigma2: float = 1.0
    threshold: float = 2.0
    target_sigma2: float | None = None
    scaling: Scaling = Scaling.MOMENT_CORRECTED
    one_sided: bool = False
    rank_normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        object.__setattr__(self, "scaling", Scaling(self.scaling))
        if self.fan_in < 1:
            raise ValueError("fan_in must be positive")
        if self.kind is InitKind.UNIFORM and not self.a < self.b:
            raise ValueError(f"uniform needs a < b, got a={self.a}, b={self.b}")
        if self.kind is InitKind.GAUSSIAN and not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.kind is InitKind.SAMPLED_GAUSSIAN:
            if not self.threshold > 0:
                raise ValueError("threshold must be positive")
            if self.target_sigma2 is not None and not self.target_sigma2 > 0:
                raise ValueError("target_sigma2 must be positive")

    @classmethod
    def uniform(cls, a: float, b: float, fan_in: int = 16) -> "InitSpec":
        return cls(InitKind.UNIFORM, fan_in=fan_in, a=a, b=b)

    @classmethod
    def gaussian(cls, mu: float, sigma2: float, fan_in: int = 16) -> "InitSpec":
        return cls(InitKind.GAUSSIAN, fan_in=fan_in, mu=mu, sigma2=sigma2)

    @classmethod
    def sampled_gaussian(cls, fan_in: int = 16, threshold: float = 2.0,
                         scaling: Scaling | str = Scaling.MOMENT_CORRECTED,
                         target_sigma2: float | None = None, one_sided: bool = False,
                         rank_normalize: bool = False) -> "InitSpec":
        return cls(InitKind.SAMPLED_GAUSSIAN, fan_in=fan_in, threshold=threshold,
                   scaling=Scaling(scaling), target_sigma2=target_sigma2,
                   one_sided=one_sided, rank_normalize=rank_normalize)

    @classmethod
    def dlrm_uniform(cls, fan_in: int) -> "InitSpec":
        bound = 1.0 / math.sqrt(fan_in)
        return cls.uniform(-bound, bound, fan_in=fan_in)

    @property
    def target(self) -> float:
        return self.target_sigma2 if self.target_sigma2 is not None else 1.0 / (3 * self.fan_in)

    @classmethod
    def parse(cls, text: str, fan_in: int = 16) -> "InitSpec":
        """Parse ``uniform:a,b``, ``gaussian:mu,sigma2`` or ``sampled[:threshold[,scaling]]``."""
        kind, _, args = text.partition(":")
        parts = [p.strip() for p in args.split(",") if p.strip()]
        kind = kind.strip().lower()
        if kind == "uniform":
            if len(parts) != 2:
                raise ValueError("uniform spec needs two bounds: uniform:a,b")
            return cls.uniform(_num(parts[0]), _num(parts[1]), fan_in=fan_in)
        if kind in ("gaussian", "normal"):
            if len(parts) != 2:
                raise ValueError("gaussian spec needs mu and sigma2: gaussian:mu,sigma2")
            return cls.gaussian(_num(parts[0]), _num(parts[1]), fan_in=fan_in)
        if kind in ("sampled", "sampled-gaussian"):
            threshold = _num(parts[0]) if parts else 2.0
            scaling = parts[1] if len(parts) > 1 else Scaling.MOMENT_CORRECTED
            return cls.sampled_gaussian(fan_in=fan_in, threshold=threshold, scaling=scaling)
        raise ValueError(f"unknown init kind {kind!r}")


def _num(text: str) -> float:
    # accepts plain floats and simple fractions such as 1/48
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def kl_optimal_gaussian(a: float, b: float) -> tuple[float, float]:
    """Mean and variance of the Gaussian closest in KL to ``Uniform(a, b)``."""
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    return (a + b) / 2, (b - a) ** 2 / 12


def truncated_second_moment(threshold: float) -> float:
    """``E[X^2 | |X| > t]`` for a standard normal ``X`` (same for ``X > t``)."""
    t = threshold
    tail = 0.5 * math.erfc(t / math.sqrt(2))
    pdf = math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    return 1.0 + t * pdf / tail


def core_rng(seed: int, core_index: int) -> np.random.Generator:
    """Independent stream per (seed, core) pair."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, core_index])))


def rejection_normal(rng: np.random.Generator, size, threshold: float, one_sided: bool = False,
                     max_redraws: int = MAX_REDRAWS) -> np.ndarray:
    """Standard normals redrawn until ``|x| > threshold`` (or ``x > threshold``)."""
    x = rng.standard_normal(size)
    flat = x.reshape(-1)

    def rejected(v):
        return v <= threshold if one_sided else np.abs(v) <= threshold

    todo = np.flatnonzero(rejected(flat))
    rounds = 0
    while len(todo):
        rounds += 1
        if rounds > max_redraws:
            raise RuntimeError(
                f"{len(todo)} entries still inside the rejection region after {max_redraws} redraws"
            )
        fresh = rng.standard_normal(len(todo))
        flat[todo] = fresh
        todo = todo[rejected(fresh)]
    return x


def sampled_scale(spec: InitSpec, d: int) -> float:
    """Multiplier applied to rejection-sampled entries of every core."""
    root = spec.target ** (1.0 / (2 * d))
    if spec.scaling is Scaling.PAPER_LITERAL:
        return 1.0 / root
    if spec.scaling is Scaling.RECIPROCAL:
        return root
    return root / math.sqrt(truncated_second_moment(spec.threshold))


def draw_entries(spec: InitSpec, rng: np.random.Generator, size, d: int = 1) -> np.ndarray:
    """Entries as they would be placed in a core of a ``d``-core train."""
    if spec.kind is InitKind.UNIFORM:
        return rng.uniform(spec.a, spec.b, size)
    if spec.kind is InitKind.GAUSSIAN:
        return spec.mu + math.sqrt(spec.sigma2) * rng.standard_normal(size)
    x = rejection_normal(rng, size, spec.threshold, spec.one_sided)
    return x * sampled_scale(spec, d)


def init_tt_cores(table: TtTable, spec: InitSpec, seed: int) -> TtTable:
    """Fill ``table.cores`` in place; each core uses its own seeded stream."""
    d = table.plan.tt_dim
    for k, core in enumerate(table.cores):
        values = draw_entries(spec, core_rng(seed, k), core.shape, d)
        if spec.kind is InitKind.SAMPLED_GAUSSIAN and spec.rank_normalize:
            values /= (core.shape[0] * core.shape[3]) ** 0.25
        core[...] = values.astype(core.dtype)
    table.version += 1
    return table


def init_dense(shape, spec: InitSpec, seed: int, dtype=np.float32) -> np.ndarray:
    return draw_entries(spec, core_rng(seed, 0), shape).astype(dtype)


@dataclass
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    num_samples: int

    def to_csv(self) -> str:
        lines = ["bin_left,bin_right,density"]
        for lo, hi, dens in zip(self.edges[:-1], self.edges[1:], self.density):
            lines.append(f"{lo:.10g},{hi:.10g},{dens:.10g}")
        return "\n".join(lines) + "\n"


def product_samples(spec: InitSpec, d: int, num_samples: int, seed: int = 0) -> np.ndarray:
    """Products of ``d`` independent entries, one drawn per core."""
    z = np.ones(num_samples)
    for k in range(d):
        z *= draw_entries(spec, core_rng(seed, k), num_samples, d)
    return z


def product_distribution_histogram(spec: InitSpec, d: int, num_samples: int = 10**6,
                                   num_bins: int = 50, seed: int = 0,
                                   value_range: tuple[float, float] | None = None) -> Histogram:
    """Empirical density of the product of ``d`` i.i.d. core entries."""
    if num_samples < 10**5:
        raise ValueError("need at least 1e5 samples for a usable histogram")
    z = product_samples(spec, d, num_samples, seed)
    if value_range is None:
        lo, hi = np.quantile(z, [0.0005, 0.9995])
        if spec.kind is InitKind.UNIFORM and spec.a >= 0:
            lo = 0.0
        value_range = (float(lo), float(hi))
    counts, edges = np.histogram(z, bins=num_bins, range=value_range)
    widths = np.diff(edges)
    density = counts / (num_samples * widths)
    return Histogram(edges, density, counts, num_samples)
