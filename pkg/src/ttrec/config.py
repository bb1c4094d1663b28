"""Flat ``key = value`` config files for the ``train`` command.

Grammar (read with :mod:`configparser`; ``#`` and ``;`` start comments)::

    [model]
    tables = 10000, 20000, 50000, 100000   # rows per categorical table
    use_tt = true                          # one bool, or one per table
    rank = 8
    tt_dim = 3
    emb_dim = 16
    dense_features = 3
    bottom_mlp = 16                        # comma list of layer widths
    top_mlp = 8
    interaction = dot                      # dot | concat
    cache_pct = 0                          # percent of rows, 0 disables
    tt_init = sampled                      # InitSpec.parse syntax
    dense_init = uniform:-0.25,0.25

    [train]
    lr = 0.5
    batch_size = 128
    iterations = 2000
    warmup_fraction = 0.1
    refresh_period = 1000
    seed = 0
    micro_batch = 2048

    [data]
    source = synthetic                     # synthetic | criteo
    zipf_s = 1.05
    pooling_factor = 1
    hot_rows = 8
    cat_scale = 1.0
    dense_scale = 2.0
    holdout = 10000
    path =                                 # criteo file
    negative_keep =                        # e.g. 0.125; empty keeps all

Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .initializer import InitSpec
from .model import TOY_LR, TOY_TABLE_SIZES, TOY_TEACHER, Interaction, ModelConfig, TableConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    zipf_s: float = 1.05
    pooling_factor: int = 1
    hot_rows: int = TOY_TEACHER["hot_rows"]
    cat_scale: float = TOY_TEACHER["cat_scale"]
    dense_scale: float = TOY_TEACHER["dense_scale"]
    holdout: int = 10_000
    path: str | None = None
    negative_keep: float | None = None


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig = field(default_factory=DataConfig)


_MODEL_KEYS = {"tables", "use_tt", "rank", "tt_dim", "emb_dim", "bottom_mlp", "top_mlp",
               "interaction", "cache_pct", "tt_init", "dense_init", "dense_features"}
_TRAIN_KEYS = {"lr", "batch_size", "iterations", "warmup_fraction", "refresh_period", "seed", "micro_batch"}
_DATA_KEYS = set(DataConfig.__dataclass_fields__)


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _per_table(text: str, count: int, conv) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if len(items) == 1:
        items = items * count
    if len(items) != count:
        raise ConfigError(f"expected 1 or {count} values, got {len(items)}")
    return [conv(t) for t in items]


def build_run_config(values: dict[str, dict[str, str]]) -> RunConfig:
    """Turn ``{section: {key: text}}`` into typed configs (defaults fill gaps)."""
    for section, allowed in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS), ("data", _DATA_KEYS)):
        unknown = set(values.get(section, {})) - allowed
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    extra = set(values) - {"model", "train", "data"}
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    m, t, d = values.get("model", {}), values.get("train", {}), values.get("data", {})
    try:
        sizes = _ints(m["tables"]) if "tables" in m else list(TOY_TABLE_SIZES)
        use_tt = _per_table(m.get("use_tt", "true"), len(sizes), _bool)
        cache = _per_table(m.get("cache_pct", "0"), len(sizes), float)
        model = ModelConfig(
            tables=[TableConfig(r, u, None, c if u else 0.0) for r, u, c in zip(sizes, use_tt, cache)],
            dense_features=int(m.get("dense_features", 3)),
            emb_dim=int(m.get("emb_dim", 16)),
            bottom_mlp=_ints(m.get("bottom_mlp", "16")),
            top_mlp=_ints(m.get("top_mlp", "8")),
            interaction=Interaction(m.get("interaction", "dot").strip().lower()),
            tt_rank=int(m.get("rank", 8)),
            tt_dim=int(m.get("tt_dim", 3)),
            tt_init=InitSpec.parse(m["tt_init"], fan_in=int(m.get("emb_dim", 16))) if m.get("tt_init") else None,
            dense_init=InitSpec.parse(m["dense_init"], fan_in=int(m.get("emb_dim", 16))) if m.get("dense_init") else None,
        )
        train = TrainConfig(
            lr=float(t.get("lr", TOY_LR)),
            batch_size=int(t.get("batch_size", 128)),
            iterations=int(t.get("iterations", 2000)),
            warmup_fraction=float(t.get("warmup_fraction", 0.1)),
            refresh_period=int(t.get("refresh_period", 1000)),
            seed=int(t.get("seed", 0)),
            micro_batch=int(t.get("micro_batch", 2048)),
        )
        data = DataConfig(
            source=d.get("source", "synthetic").strip(),
            zipf_s=float(d.get("zipf_s", 1.05)),
            pooling_factor=int(d.get("pooling_factor", 1)),
            hot_rows=int(d.get("hot_rows", TOY_TEACHER["hot_rows"])),
            cat_scale=float(d.get("cat_scale", TOY_TEACHER["cat_scale"])),
            dense_scale=float(d.get("dense_scale", TOY_TEACHER["dense_scale"])),
            holdout=int(d.get("holdout", 10_000)),
            path=d.get("path") or None,
            negative_keep=float(d["negative_keep"]) if d.get("negative_keep") else None,
        )
    except ConfigError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if data.source not in ("synthetic", "criteo"):
        raise ConfigError(f"unknown data source {data.source!r}")
    if data.source == "criteo" and not data.path:
        raise ConfigError("criteo source needs [data] path")
    return RunConfig(model, train, data)


def read_config(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        with open(Path(path), encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {s: dict(parser[s]) for s in parser.sections()}


def load_run_config(path=None, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (e.g. CLI flags)."""
    values: dict[str, dict[str, str]] = read_config(path) if path else {}
    for section, items in (overrides or {}).items():
        values.setdefault(section, {}).update({k: str(v) for k, v in items.items() if v is not None})
    return build_run_config(values)
