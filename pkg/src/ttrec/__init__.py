"""Tensor-train compressed embedding tables with an LFU row cache."""
from __future__ import annotations

__version__ = "0.1.0"

from ._backend import backend, get_backend, set_backend
from .cache import LfuCache, hot_set_drift
from .core import (
    IndexOutOfRange,
    PlanError,
    ShapePlan,
    TtTable,
    decompose_index,
    memory_reduction,
    parameter_count,
    plan_shapes,
    reconstruct_full,
    recompose_index,
)
from .freqtable import FreqTable
from .initializer import InitSpec, init_tt_cores, kl_optimal_gaussian, product_distribution_histogram
from .ops import CoreGradients, IndexBatch, Pooling, backward_bags, forward_bags, lookup_row, sgd_step

__all__ = [
    "CoreGradients", "FreqTable", "IndexBatch", "IndexOutOfRange", "InitSpec", "LfuCache", "PlanError",
    "Pooling", "ShapePlan", "TtTable", "backend", "backward_bags", "decompose_index", "forward_bags",
    "get_backend", "hot_set_drift", "init_tt_cores", "kl_optimal_gaussian", "lookup_row",
    "memory_reduction", "parameter_count", "plan_shapes", "product_distribution_histogram",
    "reconstruct_full", "recompose_index", "set_backend", "sgd_step",
]
