"""``ttrec`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error or invalid shape.
Log level comes from ``TTREC_LOG`` (default WARNING).
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import KAGGLE_COL_FACTORS, KAGGLE_TABLES, PlanError, ShapePlan, TtTable, plan_shapes

log = logging.getLogger("ttrec")


class UsageError(Exception):
    """Bad flags or inputs detected before any computation."""


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _write(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# -------------------------------------------------------------------- plan


def _shape(core_shape) -> str:
    return "(" + ",".join(str(x) for x in core_shape) + ")"


def plan_line(plan: ShapePlan) -> str:
    cores = " ".join(f"G{k + 1}={_shape(s)}" for k, s in enumerate(plan.core_shapes))
    return (f"rows={plan.num_rows} dim={plan.emb_dim} rank={max(plan.ranks)} {cores} "
            f"params={plan.parameter_count} reduction={plan.memory_reduction}")


def cmd_plan(args) -> int:
    if args.table2:
        ranks = [args.rank] if args.rank is not None else [16, 32, 64]
        lines = []
        for rank in ranks:
            for rows, factors in KAGGLE_TABLES:
                lines.append(plan_line(plan_shapes(rows, 16, 3, rank, factors, KAGGLE_COL_FACTORS)))
        _write("\n".join(lines) + "\n", args.out)
        return 0
    if args.rows is None:
        raise UsageError("plan needs --rows (or --table2)")
    try:
        plan = plan_shapes(args.rows, args.dim, args.tt_dim, 16 if args.rank is None else args.rank,
                           args.row_factors, args.col_factors)
    except PlanError as exc:
        raise UsageError(str(exc)) from exc
    text = io.StringIO()
    text.write(f"row_factors={','.join(map(str, plan.row_factors))} "
               f"col_factors={','.join(map(str, plan.col_factors))} ranks={','.join(map(str, plan.ranks))}\n")
    for k, s in enumerate(plan.core_shapes):
        text.write(f"G{k + 1}={_shape(s)}\n")
    text.write(f"params={plan.parameter_count} reduction={plan.memory_reduction}\n")
    _write(text.getvalue(), args.out)
    return 0


# -------------------------------------------------------------- init-stats


def cmd_init_stats(args) -> int:
    from .initializer import InitKind, InitSpec, product_distribution_histogram
    from dataclasses import replace

    try:
        spec = InitSpec.parse(args.spec, fan_in=args.fan_in)
        if args.alg3_literal:
            if spec.kind is not InitKind.SAMPLED_GAUSSIAN:
                raise ValueError("--alg3-literal applies to the sampled spec only")
            spec = replace(spec, one_sided=True, scaling="paper-literal")
        if args.samples < 10**5:
            raise ValueError("--samples must be at least 100000")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    hist = product_distribution_histogram(spec, args.d, args.samples, args.bins, seed=args.seed)
    _write(hist.to_csv(), args.out)
    return 0


# ------------------------------------------------------------------- train


def _train_overrides(args) -> dict:
    model, train = {}, {}
    if args.rank is not None:
        model["rank"] = args.rank
    if args.cache_pct is not None:
        model["cache_pct"] = args.cache_pct
    if args.dense:
        model["use_tt"] = "false"
    for key in ("lr", "batch_size", "iterations", "seed"):
        value = getattr(args, key)
        if value is not None:
            train[key] = value
    return {"model": model, "train": train}


def cmd_train(args) -> int:
    from .config import ConfigError, load_run_config
    from .data import SyntheticSource, criteo_batches, ingest_criteo_csv, prefetch
    from .model import train

    try:
        run = load_run_config(args.config, _train_overrides(args))
    except (ConfigError, PlanError, ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    run.train.workers = args.threads
    mc, tc, dc = run.model, run.train, run.data
    holdout = None
    if dc.source == "synthetic":
        source = SyntheticSource([t.num_rows for t in mc.tables], tc.batch_size, seed=tc.seed, s=dc.zipf_s,
                                 pooling_factor=dc.pooling_factor, num_dense=mc.dense_features,
                                 hot_rows=dc.hot_rows, dense_scale=dc.dense_scale, cat_scale=dc.cat_scale)
        holdout = source.holdout(dc.holdout, seed=tc.seed + 1) if dc.holdout else None
        stream = iter(source)
    else:
        records = ingest_criteo_csv(dc.path, [t.num_rows for t in mc.tables])
        stream = criteo_batches(iter(records), tc.batch_size, dc.negative_keep, seed=tc.seed)
    if args.prefetch:
        stream = prefetch(stream, depth=2)
    metrics, model = train(mc, tc, stream, holdout=holdout)
    _write(metrics.to_csv(include_timing=args.timing), args.metrics)
    summary = {"iterations": len(metrics.loss), "final_loss": metrics.loss[-1] if metrics.loss else None,
               "holdout_accuracy": metrics.final_accuracy, "parameters": model.parameter_count()}
    log.info("train summary %s", json.dumps(summary))
    if args.checkpoint:
        meta = {"seed": tc.seed, "iterations": tc.iterations, "lr": tc.lr,
                "tables": [t.num_rows for t in mc.tables], "use_tt": [t.use_tt for t in mc.tables],
                "holdout_accuracy": metrics.final_accuracy}
        model.save(args.checkpoint, meta)
    return 0


# --------------------------------------------------------------- cache-sim


def cmd_cache_sim(args) -> int:
    from .cache import LfuCache, default_capacity, hot_set_drift
    from .data import sample_zipf
    from .freqtable import FreqTable
    from .initializer import InitSpec, init_tt_cores
    from .ops import IndexBatch

    if args.zipf_s < 0 or args.capacity_pct <= 0 or not 0 <= args.warmup_fraction < 1:
        raise UsageError("need zipf-s >= 0, capacity-pct > 0, 0 <= warmup-fraction < 1")
    try:
        plan = plan_shapes(args.rows, 16, 3, 1)
    except PlanError as exc:
        raise UsageError(str(exc)) from exc
    table = TtTable.zeros(plan, np.float32)
    init_tt_cores(table, InitSpec.sampled_gaussian(fan_in=16), args.seed)
    capacity = default_capacity(args.rows, args.capacity_pct / 100)
    cache = LfuCache(capacity, 16, np.float32, refresh_period=args.refresh_period)
    top_k = args.top_k or capacity
    rng = np.random.default_rng(args.seed)
    warmup = int(round(args.warmup_fraction * args.iters))
    offsets = np.arange(args.batch_size + 1, dtype=np.int64)
    windows: list[FreqTable] = []
    current = FreqTable()
    drift = ""
    out = io.StringIO()
    out.write("iteration,hit_rate,drift\n")
    for it in range(args.iters):
        if it == warmup:
            cache.warmup_finalize(table)
        elif it > warmup and (it - warmup) % args.refresh_period == 0:
            cache.refresh(table)
        idx = sample_zipf(rng, args.rows, args.zipf_s, args.batch_size)
        cache.record_and_partition(IndexBatch(idx, offsets))
        current.record(idx)
        if (it + 1) % args.window == 0:
            windows.append(current)
            current = FreqTable()
            if len(windows) >= 2:
                drift = f"{hot_set_drift(windows[-2:], top_k)[0]:.6g}"
        out.write(f"{it},{cache.hit_rate():.6g},{drift}\n")
    _write(out.getvalue(), args.out)
    return 0


# ------------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    from .bench import bench_cache_bypass, bench_pooling, rows_to_csv
    from .model import toy_model_config

    config = toy_model_config(rank=args.ranks[0])
    rows = bench_pooling(config, args.pooling, args.ranks, batch_size=args.batch_size, reps=args.reps,
                         seed=args.seed)
    _write(rows_to_csv(rows), args.out)
    if args.bypass:
        report = bench_cache_bypass(seed=args.seed, reps=args.reps)
        sys.stderr.write(json.dumps(report.__dict__, sort_keys=True) + "\n")
    return 0


# ----------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    from .checkpoint import read_header

    try:
        header = read_header(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    _write(json.dumps(header, indent=2, sort_keys=True) + "\n", args.out)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttrec", description="Tensor-train embedding tables.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="TT shapes, parameter count and memory reduction")
    p.add_argument("--rows", type=_positive)
    p.add_argument("--dim", type=_positive, default=16)
    p.add_argument("--tt-dim", type=int, default=3)
    p.add_argument("--rank", type=_positive)
    p.add_argument("--row-factors", type=_int_list)
    p.add_argument("--col-factors", type=_int_list)
    p.add_argument("--table2", action="store_true", help="emit the 7 Kaggle tables (all ranks unless --rank)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("init-stats", help="histogram of the product of d core entries (CSV)")
    p.add_argument("--spec", default="sampled", help="uniform:a,b | gaussian:mu,sigma2 | sampled[:t[,scaling]]")
    p.add_argument("--fan-in", type=_positive, default=16)
    p.add_argument("--d", type=_positive, default=3)
    p.add_argument("--samples", type=int, default=10**6)
    p.add_argument("--bins", type=_positive, default=50)
    p.add_argument("--alg3-literal", action="store_true", help="one-sided rejection and literal scaling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_init_stats)

    p = sub.add_parser("train", help="train the toy model; metrics CSV and optional checkpoint")
    p.add_argument("--config", help="key=value config file (see ttrec.config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=_positive)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--rank", type=_positive)
    p.add_argument("--cache-pct", type=float)
    p.add_argument("--dense", action="store_true", help="uncompressed tables everywhere")
    p.add_argument("--metrics", help="metrics CSV path (default stdout)")
    p.add_argument("--checkpoint", help="write a TTRECV01 checkpoint here")
    p.add_argument("--timing", action="store_true", help="fill the ms_per_iter column")
    p.add_argument("--prefetch", action="store_true", help="generate data one batch ahead on a thread")
    p.add_argument("--threads", type=_positive, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cache-sim", help="replay a Zipfian stream through the LFU cache (CSV)")
    p.add_argument("--zipf-s", type=float, default=1.05)
    p.add_argument("--rows", type=_positive, default=100_000)
    p.add_argument("--capacity-pct", type=float, default=0.01)
    p.add_argument("--iters", type=_positive, default=1000)
    p.add_argument("--batch-size", type=_positive, default=1024)
    p.add_argument("--warmup-fraction", type=float, default=0.1)
    p.add_argument("--refresh-period", type=_positive, default=100)
    p.add_argument("--window", type=_positive, default=100, help="iterations per drift window")
    p.add_argument("--top-k", type=int, default=0, help="hot-set size for drift (default: capacity)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cache_sim)

    p = sub.add_parser("bench", help="embedding forward+backward timing over P and R (CSV)")
    p.add_argument("--pooling", type=_int_list, default=[1, 10, 100])
    p.add_argument("--ranks", type=_int_list, default=[8, 16, 32, 64])
    p.add_argument("--batch-size", type=_positive, default=64)
    p.add_argument("--reps", type=_positive, default=30)
    p.add_argument("--bypass", action="store_true", help="also run the 100%% hit-rate bypass check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="dump a checkpoint header as JSON")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("TTREC_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"ttrec {args.command}: error: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure
        log.debug("failure", exc_info=True)
        sys.stderr.write(f"ttrec {args.command}: failed: {type(exc).__name__}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
