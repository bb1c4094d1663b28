"""Small DLRM-style model with TT-compressed or dense embedding tables.

Dense features go through a bottom MLP; each categorical feature is pooled
from its embedding table; the bottom-MLP output and the pooled embeddings
interact (pairwise dots or concatenation) and a top MLP produces one logit.
All gradients are analytic and applied with plain SGD.
"""
from __future__ import annotations

import enum
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import ops
from .cache import CacheState, LfuCache
from .core import ShapePlan, TtTable, plan_shapes
from .data import Batch
from .initializer import InitSpec, init_dense, init_tt_cores
from .ops import IndexBatch

log = logging.getLogger(__name__)


class Interaction(enum.Enum):
    DOT = "dot"
    CONCAT = "concat"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TableConfig:
    num_rows: int
    use_tt: bool = True
    plan: ShapePlan | None = None
    cache_capacity_pct: float = 0.0


@dataclass
class ModelConfig:
    tables: list[TableConfig]
    dense_features: int = 3
    emb_dim: int = 16
    bottom_mlp: list[int] = field(default_factory=lambda: [16])
    top_mlp: list[int] = field(default_factory=lambda: [8])
    interaction: Interaction = Interaction.DOT
    tt_rank: int = 8
    tt_dim: int = 3
    tt_init: InitSpec | None = None
    dense_init: InitSpec | None = None

    def __post_init__(self):
        self.interaction = Interaction(self.interaction)
        if self.bottom_mlp and self.bottom_mlp[-1] != self.emb_dim:
            raise ValueError("bottom MLP must end at emb_dim")
        if not self.bottom_mlp and self.dense_features != self.emb_dim:
            raise ValueError("without a bottom MLP dense_features must equal emb_dim")
        for t in self.tables:
            if t.plan is not None and t.plan.emb_dim != self.emb_dim:
                raise ValueError("every table must share emb_dim")

    def plan_for(self, table: TableConfig) -> ShapePlan:
        if table.plan is not None:
            return table.plan
        return plan_shapes(table.num_rows, self.emb_dim, self.tt_dim, self.tt_rank)

    @property
    def interaction_dim(self) -> int:
        k = len(self.tables) + 1
        if self.interaction is Interaction.DOT:
            return self.emb_dim + k * (k - 1) // 2
        return self.emb_dim * k


@dataclass
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 128
    iterations: int = 2000
    warmup_fraction: float = 0.1
    refresh_period: int = 1000
    seed: int = 0
    micro_batch: int = ops.DEFAULT_MICRO_BATCH
    workers: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be positive")

    @property
    def warmup_iterations(self) -> int:
        return int(round(self.warmup_fraction * self.iterations))

    def stage_events(self) -> dict[int, str]:
        """Iteration -> "finalize" / "refresh" for every cache transition."""
        start = self.warmup_iterations
        events = {start: "finalize"}
        for t in range(start + self.refresh_period, self.iterations, self.refresh_period):
            events[t] = "refresh"
        return events


@dataclass
class Metrics:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    hit_rate: list[float] = field(default_factory=list)
    ms_per_iter: list[float] = field(default_factory=list)
    final_accuracy: float | None = None
    final_loss: float | None = None

    def to_csv(self, include_timing: bool = False) -> str:
        out = io.StringIO()
        out.write("iter,loss,accuracy,hit_rate,ms_per_iter\n")
        for t, (loss, acc, hit, ms) in enumerate(zip(self.loss, self.accuracy, self.hit_rate, self.ms_per_iter)):
            ms_text = f"{ms:.4f}" if include_timing else ""
            out.write(f"{t},{loss:.9g},{acc:.9g},{hit:.9g},{ms_text}\n")
        return out.getvalue()


# ------------------------------------------------------------------- layers


def _sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    # log(1 + exp(z)) - y z, stable form
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


class Mlp:
    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, dtype, relu_last: bool):
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            std = math.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append((std * rng.standard_normal((fan_in, fan_out))).astype(dtype))
            self.biases.append((math.sqrt(1.0 / fan_out) * rng.standard_normal(fan_out)).astype(dtype))
        self.relu_last = relu_last

    def forward(self, x):
        acts = [x]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if k < len(self.weights) - 1 or self.relu_last:
                x = np.maximum(x, 0)
            acts.append(x)
        return x, acts

    def backward(self, acts, grad):
        gws, gbs = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1 or self.relu_last:
                grad = grad * (acts[k + 1] > 0)
            gws[k] = acts[k].T @ grad
            gbs[k] = grad.sum(axis=0)
            grad = grad @ self.weights[k].T
        return grad, gws, gbs

    def sgd(self, gws, gbs, lr):
        for w, b, gw, gb in zip(self.weights, self.biases, gws, gbs):
            w -= lr * gw
            b -= lr * gb

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


class DenseEmbedding:
    def __init__(self, weight: np.ndarray):
        self.weight = weight

    def forward(self, batch: IndexBatch):
        return ops.dense_embedding_bag(self.weight, batch), batch

    def backward(self, state, grad_output):
        return ops.dense_embedding_bag_grad(state, grad_output, self.weight.dtype)

    def sgd(self, grads, lr):
        rows, g = grads
        self.weight[rows] -= np.asarray(lr, dtype=self.weight.dtype) * g

    def full_gradient(self, grads):
        rows, g = grads
        full = np.zeros_like(self.weight)
        full[rows] = g
        return {"weight": full}

    def parameter_count(self) -> int:
        return self.weight.size


class TtEmbedding:
    def __init__(self, table: TtTable, cache: LfuCache | None = None,
                 micro_batch: int = ops.DEFAULT_MICRO_BATCH, workers: int = 1):
        self.table = table
        self.cache = cache
        self.micro_batch = micro_batch
        self.workers = workers

    def forward(self, batch: IndexBatch):
        if self.cache is None:
            out, ctx = ops.forward_bags(self.table, batch, self.micro_batch, workers=self.workers)
            return out, (batch, ctx, None)
        cached, tt_part = self.cache.record_and_partition(batch)
        out, ctx = ops.forward_bags(self.table, tt_part, self.micro_batch, workers=self.workers)
        out += self.cache.forward(cached)
        return out, (tt_part, ctx, cached)

    def backward(self, state, grad_output):
        tt_part, ctx, cached = state
        grads = ops.backward_bags(self.table, tt_part, ctx, grad_output, workers=self.workers)
        slot = None if cached is None else self.cache.slot_gradients(cached, grad_output)
        return grads, slot

    def sgd(self, grads, lr):
        core_grads, slot = grads
        ops.sgd_step(self.table, core_grads, lr)
        if slot is not None:
            self.cache.cached_sgd_update(slot[0], lr, slot[1])

    def full_gradient(self, grads):
        core_grads, _ = grads
        return {f"core{k}": g for k, g in enumerate(core_grads.grads)}

    def parameter_count(self) -> int:
        return self.table.parameter_count


class DlrmModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype="float32",
                 micro_batch: int = ops.DEFAULT_MICRO_BATCH, workers: int = 1,
                 refresh_period: int = 1000):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 7])
        if config.bottom_mlp:
            self.bottom = Mlp([config.dense_features] + config.bottom_mlp, rng, self.dtype, relu_last=True)
        else:
            self.bottom = None
        self.top = Mlp([config.interaction_dim] + config.top_mlp + [1], rng, self.dtype, relu_last=False)
        n = config.emb_dim
        tt_init = config.tt_init or InitSpec.sampled_gaussian(fan_in=n, rank_normalize=True)
        dense_init = config.dense_init or InitSpec.dlrm_uniform(n)
        self.embeddings: list[DenseEmbedding | TtEmbedding] = []
        for t, tc in enumerate(config.tables):
            table_seed = int(np.random.SeedSequence([seed, 100 + t]).generate_state(1)[0])
            if tc.use_tt:
                table = TtTable.zeros(config.plan_for(tc), self.dtype, name=f"emb{t}")
                init_tt_cores(table, tt_init, table_seed)
                cache = None
                if tc.cache_capacity_pct > 0:
                    cache = LfuCache.for_table(table, tc.cache_capacity_pct, refresh_period=refresh_period)
                self.embeddings.append(TtEmbedding(table, cache, micro_batch, workers))
            else:
                weight = init_dense((tc.num_rows, n), dense_init, table_seed, self.dtype)
                self.embeddings.append(DenseEmbedding(weight))

    # --------------------------------------------------------------- forward

    def forward(self, batch: Batch):
        x = batch.dense.astype(self.dtype)
        if self.bottom is not None:
            z0, bot_acts = self.bottom.forward(x)
        else:
            z0, bot_acts = x, None
        pooled, emb_states = [], []
        for emb, sparse in zip(self.embeddings, batch.sparse):
            out, st = emb.forward(sparse)
            pooled.append(out)
            emb_states.append(st)
        feats = np.stack([z0] + pooled, axis=1)  # (B, k, N)
        if self.config.interaction is Interaction.DOT:
            gram = feats @ feats.transpose(0, 2, 1)
            li, lj = np.tril_indices(feats.shape[1], k=-1)
            top_in = np.concatenate([z0, gram[:, li, lj]], axis=1)
        else:
            top_in = feats.reshape(len(x), -1)
        logits, top_acts = self.top.forward(top_in)
        state = (bot_acts, emb_states, feats, top_acts)
        return logits[:, 0], state

    def backward(self, state, dlogits: np.ndarray):
        bot_acts, emb_states, feats, top_acts = state
        grads = {}
        d_top_in, grads["top_w"], grads["top_b"] = self.top.backward(top_acts, dlogits[:, None].astype(self.dtype))
        n = self.config.emb_dim
        if self.config.interaction is Interaction.DOT:
            dz0 = d_top_in[:, :n].copy()
            k = feats.shape[1]
            li, lj = np.tril_indices(k, k=-1)
            dgram = np.zeros((len(feats), k, k), dtype=feats.dtype)
            dgram[:, li, lj] = d_top_in[:, n:]
            dfeats = dgram @ feats + dgram.transpose(0, 2, 1) @ feats
            dfeats[:, 0] += dz0
        else:
            dfeats = d_top_in.reshape(feats.shape)
        if self.bottom is not None:
            _, grads["bot_w"], grads["bot_b"] = self.bottom.backward(bot_acts, dfeats[:, 0])
        grads["emb"] = [
            emb.backward(st, np.ascontiguousarray(dfeats[:, t + 1]))
            for t, (emb, st) in enumerate(zip(self.embeddings, emb_states))
        ]
        return grads

    def apply(self, grads, lr: float) -> None:
        self.top.sgd(grads["top_w"], grads["top_b"], lr)
        if self.bottom is not None:
            self.bottom.sgd(grads["bot_w"], grads["bot_b"], lr)
        for emb, g in zip(self.embeddings, grads["emb"]):
            emb.sgd(g, lr)

    def loss(self, batch: Batch) -> float:
        logits, _ = self.forward(batch)
        return bce_with_logits(logits.astype(np.float64), batch.labels)

    def loss_and_gradients(self, batch: Batch):
        logits, state = self.forward(batch)
        y = batch.labels
        loss = bce_with_logits(logits.astype(np.float64), y)
        dlogits = (_sigmoid(logits.astype(np.float64)) - y) / len(y)
        return loss, logits, self.backward(state, dlogits)

    def predict(self, batch: Batch) -> np.ndarray:
        """Probabilities; does not record cache frequencies."""
        caches = [e.cache for e in self.embeddings if isinstance(e, TtEmbedding)]
        saved = [(c.freq, c.hits, c.lookups) for c in caches if c is not None]
        for c in caches:
            if c is not None:
                c.freq = _NullFreq(c.freq)
        try:
            logits, _ = self.forward(batch)
        finally:
            it = iter(saved)
            for c in caches:
                if c is not None:
                    c.freq, c.hits, c.lookups = next(it)
        return _sigmoid(logits.astype(np.float64))

    def evaluate(self, batch: Batch) -> tuple[float, float]:
        p = self.predict(batch)
        y = batch.labels
        eps = 1e-12
        loss = float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))
        return float(np.mean((p > 0.5) == (y > 0.5))), loss

    # ------------------------------------------------------------ accounting

    def parameter_count(self) -> int:
        mlps = self.top.parameter_count() + (self.bottom.parameter_count() if self.bottom else 0)
        return mlps + sum(e.parameter_count() for e in self.embeddings)

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array."""
        params = {}
        for name, mlp in (("bot", self.bottom), ("top", self.top)):
            if mlp is None:
                continue
            for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                params[f"{name}{k}.w"] = w
                params[f"{name}{k}.b"] = b
        for t, emb in enumerate(self.embeddings):
            if isinstance(emb, TtEmbedding):
                for k, core in enumerate(emb.table.cores):
                    params[f"emb{t}.core{k}"] = core
            else:
                params[f"emb{t}.weight"] = emb.weight
        return params

    def named_gradients(self, grads) -> dict[str, np.ndarray]:
        out = {}
        for name, key in (("bot", "bot"), ("top", "top")):
            if f"{key}_w" not in grads:
                continue
            for k, (gw, gb) in enumerate(zip(grads[f"{key}_w"], grads[f"{key}_b"])):
                out[f"{name}{k}.w"] = gw
                out[f"{name}{k}.b"] = gb
        for t, (emb, g) in enumerate(zip(self.embeddings, grads["emb"])):
            for k, v in emb.full_gradient(g).items():
                out[f"emb{t}.{k}"] = v
        return out

    def tt_tables(self) -> dict[str, TtTable]:
        return {e.table.name: e.table for e in self.embeddings if isinstance(e, TtEmbedding)}

    def caches(self) -> list[LfuCache]:
        return [e.cache for e in self.embeddings if isinstance(e, TtEmbedding) and e.cache is not None]

    def save(self, path, meta: dict | None = None) -> dict:
        from .checkpoint import save_checkpoint

        arrays = {k: v for k, v in self.parameters().items() if ".core" not in k}
        for t, emb in enumerate(self.embeddings):
            if isinstance(emb, TtEmbedding) and emb.cache is not None:
                arrays[f"emb{t}.cache.rows"] = emb.cache.slot_rows
                arrays[f"emb{t}.cache.store"] = emb.cache.row_store
        return save_checkpoint(path, self.tt_tables(), arrays, meta)

    def load(self, path) -> dict:
        """Restore parameters written by :meth:`save` into this model (same config)."""
        from .checkpoint import load_checkpoint

        tables, arrays, header = load_checkpoint(path)
        params = self.parameters()
        for name, table in tables.items():
            t = int(name[len("emb"):])
            emb = self.embeddings[t]
            if not isinstance(emb, TtEmbedding) or emb.table.plan != table.plan:
                raise ValueError(f"checkpoint table {name} does not match the model")
            for dst, src in zip(emb.table.cores, table.cores):
                dst[...] = src
        for name, value in arrays.items():
            if ".cache." in name:
                t = int(name.split(".")[0][len("emb"):])
                cache = self.embeddings[t].cache
                if name.endswith(".rows"):
                    cache.slot_rows[...] = value
                else:
                    cache.row_store[...] = value
                continue
            if name not in params or params[name].shape != value.shape:
                raise ValueError(f"checkpoint array {name} does not match the model")
            params[name][...] = value
        for cache in self.caches():
            cache._reindex()
            if len(cache):
                cache.state = CacheState.ACTIVE
        return header


class _NullFreq:
    """Stand-in frequency table that ignores records (evaluation passes)."""

    def __init__(self, inner):
        self._inner = inner

    def record(self, indices):
        pass

    def __getattr__(self, name):
        return getattr(self._inner, name)


# ---------------------------------------------------------------- training


def train(model_config: ModelConfig, train_config: TrainConfig, data_source: Iterable[Batch],
          holdout: Batch | None = None, model: DlrmModel | None = None) -> tuple[Metrics, DlrmModel]:
    """SGD training with the warm-up / finalize / refresh cache schedule."""
    tc = train_config
    if model is None:
        model = DlrmModel(model_config, seed=tc.seed, dtype=tc.dtype, micro_batch=tc.micro_batch,
                          workers=tc.workers, refresh_period=tc.refresh_period)
    events = tc.stage_events()
    metrics = Metrics()
    correct = seen = 0
    source: Iterator[Batch] = iter(data_source)
    for it in range(tc.iterations):
        event = events.get(it)
        for emb in model.embeddings:
            if isinstance(emb, TtEmbedding) and emb.cache is not None:
                if event == "finalize" and emb.cache.state is CacheState.WARMUP:
                    emb.cache.warmup_finalize(emb.table)
                elif event == "refresh":
                    emb.cache.refresh(emb.table)
        try:
            batch = next(source)
        except StopIteration:
            break
        start = time.perf_counter()
        loss, logits, grads = model.loss_and_gradients(batch)
        if not math.isfinite(loss):
            recent = ", ".join(f"{v:.4g}" for v in metrics.loss[-5:])
            raise TrainingDiverged(f"loss became {loss} at iteration {it}; recent losses [{recent}]")
        model.apply(grads, tc.lr)
        elapsed = (time.perf_counter() - start) * 1e3
        correct += int(np.sum((logits > 0) == (batch.labels > 0.5)))
        seen += batch.size
        caches = model.caches()
        hit = float(np.mean([c.hit_rate() for c in caches])) if caches else 0.0
        metrics.loss.append(loss)
        metrics.accuracy.append(correct / seen)
        metrics.hit_rate.append(hit)
        metrics.ms_per_iter.append(elapsed)
    if holdout is not None:
        metrics.final_accuracy, metrics.final_loss = model.evaluate(holdout)
    return metrics, model


# ------------------------------------------------------------- toy presets

TOY_TABLE_SIZES = (10_000, 20_000, 50_000, 100_000)
TOY_TEACHER = {"hot_rows": 8, "cat_scale": 1.0, "dense_scale": 2.0}
TOY_LR = 0.5


def toy_model_config(use_tt: bool = True, cache_capacity_pct: float = 0.0, rank: int = 8,
                     table_sizes: Sequence[int] = TOY_TABLE_SIZES,
                     interaction: Interaction = Interaction.DOT) -> ModelConfig:
    """The default 3-dense / 4-table toy model with every table TT or dense."""
    tables = [TableConfig(rows, use_tt, None, cache_capacity_pct if use_tt else 0.0) for rows in table_sizes]
    return ModelConfig(tables, tt_rank=rank, interaction=interaction)
