"""Hot loops for TT embedding lookup and gradient accumulation.

Each operation has an ``@njit`` kernel and a numpy twin. The numpy twin uses
stacked ``np.matmul`` (the batched-GEMM formulation); the numba kernel walks
lookups one at a time with explicit loops. Callers go through the dispatch
functions at the bottom, which consult :mod:`ttrec._backend`.

Level arrays: for a chunk of ``L`` lookups, ``levels[k]`` holds the partial
products of the first ``k + 2`` cores, shape ``(L, n_1..n_{k+2} * R_{k+2})``.
The last level is the embedding row itself.
"""
from __future__ import annotations

import numpy as np

from ._backend import njit, use_numba


def level_sizes(cores) -> list[int]:
    sizes = []
    p = cores[0].shape[2]
    for core in cores[1:]:
        p *= core.shape[2]
        sizes.append(p * core.shape[3])
    return sizes


# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True, nogil=True)
def _slice_product(prev, core, i, out):
    # out (P, n*Ro) = prev (P, Rin) @ core[:, i] viewed (Rin, n*Ro)
    P, rin = prev.shape
    n = core.shape[2]
    ro = core.shape[3]
    for p in range(P):
        for c in range(n * ro):
            out[p, c] = 0.0
        for q in range(rin):
            a = prev[p, q]
            for j in range(n):
                base = j * ro
                for r in range(ro):
                    out[p, base + r] += a * core[q, i, j, r]


@njit(cache=True, nogil=True)
def _forward_levels_nb(cores, digits, levels):
    L = digits.shape[0]
    d = len(cores)
    for t in range(L):
        prev = cores[0][0, digits[t, 0]]
        P = prev.shape[0]
        for k in range(1, d):
            core = cores[k]
            n = core.shape[2]
            ro = core.shape[3]
            out = levels[k - 1][t].reshape((P, n * ro))
            _slice_product(prev, core, digits[t, k], out)
            P = P * n
            prev = levels[k - 1][t].reshape((P, ro))


@njit(cache=True, nogil=True)
def _backward_nb(cores, digits, levels, grad_rows, grads, scratch_a, scratch_b):
    L = digits.shape[0]
    d = len(cores)
    N = grad_rows.shape[1]
    for t in range(L):
        for c in range(N):
            scratch_a[c] = grad_rows[t, c]
        P = N
        cur = scratch_a
        nxt = scratch_b
        for k in range(d - 1, 0, -1):
            core = cores[k]
            gcore = grads[k]
            rin = core.shape[0]
            i = digits[t, k]
            n = core.shape[2]
            ro = core.shape[3]
            P = P // n
            if k == 1:
                prev = cores[0][0, digits[t, 0]]
            else:
                prev = levels[k - 2][t].reshape((P, rin))
            dw = cur[: P * n * ro].reshape((P, n * ro))
            dprev = nxt[: P * rin].reshape((P, rin))
            for p in range(P):
                for q in range(rin):
                    a = prev[p, q]
                    s = 0.0
                    for j in range(n):
                        base = j * ro
                        for r in range(ro):
                            g = dw[p, base + r]
                            gcore[q, i, j, r] += a * g
                            s += g * core[q, i, j, r]
                    dprev[p, q] = s
            cur, nxt = nxt, cur
        g0 = grads[0]
        i0 = digits[t, 0]
        n0 = g0.shape[2]
        r0 = g0.shape[3]
        for j in range(n0):
            for r in range(r0):
                g0[0, i0, j, r] += cur[j * r0 + r]


@njit(cache=True, nogil=True)
def _segment_accumulate_nb(rows, bag_ids, coeff, out):
    L, N = rows.shape
    for t in range(L):
        b = bag_ids[t]
        c = coeff[t]
        for j in range(N):
            out[b, j] += c * rows[t, j]


@njit(cache=True, nogil=True)
def _gather_scaled_nb(src, bag_ids, coeff, out):
    L, N = out.shape
    for t in range(L):
        b = bag_ids[t]
        c = coeff[t]
        for j in range(N):
            out[t, j] = c * src[b, j]


# --------------------------------------------------------------------------
# numpy twins


def _gather_slices(core: np.ndarray, idx: np.ndarray) -> np.ndarray:
    r0, _, n, r1 = core.shape
    return core.transpose(1, 0, 2, 3)[idx].reshape(len(idx), r0, n * r1)


def _forward_levels_np(cores, digits, levels):
    L = digits.shape[0]
    prev = cores[0][0][digits[:, 0]]  # (L, n1, R1)
    P = prev.shape[1]
    for k in range(1, len(cores)):
        core = cores[k]
        rin, _, n, ro = core.shape
        out = levels[k - 1].reshape(L, P, n * ro)
        np.matmul(prev.reshape(L, P, rin), _gather_slices(core, digits[:, k]), out=out)
        P *= n
        prev = out.reshape(L, P, ro)


def _backward_np(cores, digits, levels, grad_rows, grads):
    L, N = grad_rows.shape
    d = len(cores)
    dw = grad_rows.reshape(L, N, 1)
    P = N
    for k in range(d - 1, 0, -1):
        core = cores[k]
        rin, m, n, ro = core.shape
        P //= n
        if k == 1:
            prev = cores[0][0][digits[:, 0]].reshape(L, P, rin)
        else:
            prev = levels[k - 2].reshape(L, P, rin)
        dw2 = dw.reshape(L, P, n * ro)
        dslice = np.matmul(prev.transpose(0, 2, 1), dw2)  # (L, rin, n*ro)
        buf = np.zeros((m, rin, n * ro), dtype=grads[k].dtype)
        np.add.at(buf, digits[:, k], dslice)
        grads[k] += buf.reshape(m, rin, n, ro).transpose(1, 0, 2, 3)
        dw = np.matmul(dw2, _gather_slices(core, digits[:, k]).transpose(0, 2, 1))
    m0, n0, r0 = cores[0].shape[1:]
    buf = np.zeros((m0, n0 * r0), dtype=grads[0].dtype)
    np.add.at(buf, digits[:, 0], dw.reshape(L, n0 * r0))
    grads[0][0] += buf.reshape(m0, n0, r0)


def _segment_accumulate_np(rows, bag_ids, coeff, out):
    np.add.at(out, bag_ids, rows * coeff[:, None])


def _gather_scaled_np(src, bag_ids, coeff, out):
    np.multiply(src[bag_ids], coeff[:, None], out=out)


# --------------------------------------------------------------------------
# dispatch


def forward_levels(cores, digits: np.ndarray, levels=None) -> list[np.ndarray]:
    """Fill (or allocate) the level arrays for a chunk of lookups."""
    L = digits.shape[0]
    if levels is None:
        levels = [np.empty((L, s), dtype=cores[0].dtype) for s in level_sizes(cores)]
    if L == 0:
        return levels
    if use_numba():
        _forward_levels_nb(tuple(cores), digits, tuple(levels))
    else:
        _forward_levels_np(cores, digits, levels)
    return levels


def backward_accumulate(cores, digits: np.ndarray, levels, grad_rows: np.ndarray, grads) -> None:
    """Add the core gradients of ``sum_t <grad_rows[t], row_t>`` into ``grads``."""
    if digits.shape[0] == 0:
        return
    if use_numba():
        width = max(grad_rows.shape[1], max(c.shape[2] * c.shape[3] for c in cores))
        width = max(width, max(s for s in level_sizes(cores)))
        scratch_a = np.empty(width, dtype=grad_rows.dtype)
        scratch_b = np.empty(width, dtype=grad_rows.dtype)
        if len(levels) == 0:
            levels = [np.empty((0, 0), dtype=grad_rows.dtype)]
        _backward_nb(tuple(cores), digits, tuple(levels), grad_rows, tuple(grads), scratch_a, scratch_b)
    else:
        _backward_np(cores, digits, levels, grad_rows, grads)


def segment_accumulate(rows: np.ndarray, bag_ids: np.ndarray, coeff: np.ndarray, out: np.ndarray) -> None:
    """``out[bag_ids[t]] += coeff[t] * rows[t]`` in ascending ``t`` order."""
    if rows.shape[0] == 0:
        return
    if use_numba():
        _segment_accumulate_nb(rows, bag_ids, coeff, out)
    else:
        _segment_accumulate_np(rows, bag_ids, coeff, out)


def gather_scaled(src: np.ndarray, bag_ids: np.ndarray, coeff: np.ndarray) -> np.ndarray:
    """``out[t] = coeff[t] * src[bag_ids[t]]``."""
    out = np.empty((len(bag_ids), src.shape[1]), dtype=src.dtype)
    if len(bag_ids) == 0:
        return out
    if use_numba():
        _gather_scaled_nb(src, bag_ids, coeff, out)
    else:
        _gather_scaled_np(src, bag_ids, coeff, out)
    return out
