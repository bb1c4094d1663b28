"""Compare the numba and numpy kernel backends on the hot paths.

Usage::

    python3 benchmarks/bench_backends.py [--reps 20] [--rank 16] [--out backends.csv]

For each workload the two backends are timed on identical inputs, and the
outputs are checked for agreement before timing. Prints a CSV with columns
``workload,backend,us_per_call,mom_us_per_call,speedup_vs_numpy``.
"""
from __future__ import annotations

import argparse
import io
import sys

import numpy as np

from ttrec import ops
from ttrec._backend import NUMBA_AVAILABLE, backend
from ttrec.bench import median_of_means, time_call
from ttrec.core import TtTable, plan_shapes
from ttrec.data import sample_zipf
from ttrec.freqtable import FreqTable
from ttrec.initializer import InitSpec, init_tt_cores


def workloads(rank: int, seed: int):
    rng = np.random.default_rng(seed)
    table = TtTable.zeros(plan_shapes(1_000_000, 16, 3, rank), np.float32)
    init_tt_cores(table, InitSpec.sampled_gaussian(fan_in=16, rank_normalize=True), seed)
    out = {}
    for pooling in (1, 10):
        batch_size = 256
        idx = sample_zipf(rng, table.num_rows, 1.05, batch_size * pooling)
        batch = ops.IndexBatch(idx, np.arange(0, len(idx) + 1, pooling))
        grad = rng.standard_normal((batch_size, 16)).astype(np.float32)

        def fwd(batch=batch):
            return ops.forward_bags(table, batch)[0]

        def fwd_bwd(batch=batch, grad=grad):
            _, ctx = ops.forward_bags(table, batch, save_intermediates=True)
            return ops.backward_bags(table, batch, ctx, grad).grads[0]

        out[f"forward_P{pooling}"] = fwd
        out[f"forward_backward_P{pooling}"] = fwd_bwd
    stream = sample_zipf(rng, 1_000_000, 1.05, 50_000)

    def freq_record():
        ft = FreqTable()
        ft.record(stream)
        return ft.top_k(100)

    out["freqtable_record_50k"] = freq_record
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--rank", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out")
    args = parser.parse_args(argv)
    if not NUMBA_AVAILABLE:
        sys.stderr.write("numba is not importable; nothing to compare\n")
        return 1
    buf = io.StringIO()
    buf.write("workload,backend,us_per_call,mom_us_per_call,speedup_vs_numpy\n")
    for name, fn in workloads(args.rank, args.seed).items():
        results = {}
        with backend("numpy"):
            reference = fn()
        with backend("numba"):
            # float32 sums with cancellation: tolerance relative to the array scale
            scale = float(np.max(np.abs(reference))) if np.size(reference) else 1.0
            np.testing.assert_allclose(fn(), reference, rtol=1e-5, atol=1e-6 * max(scale, 1.0))
        for which in ("numpy", "numba"):
            with backend(which):
                secs = time_call(fn, args.reps, warmup=2) * 1e6
            results[which] = (float(secs.mean()), median_of_means(secs))
        base = results["numpy"][1]
        for which, (mean, mom) in results.items():
            buf.write(f"{name},{which},{mean:.2f},{mom:.2f},{base / mom:.2f}\n")
    text = buf.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
