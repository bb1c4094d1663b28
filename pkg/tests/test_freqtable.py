from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ttrec._backend import backend
from ttrec.data import sample_zipf
from ttrec.freqtable import MAX_LOAD, FreqTable


def sort_oracle_top(stream, k):
    counts = Counter(stream.tolist())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return np.array([key for key, _ in ranked[:k]])


def test_counts_repeats():
    ft = FreqTable()
    ft.record([3, 3, 9, 3])
    assert ft[3] == 3 and ft[9] == 1 and ft[4] == 0
    assert ft.total() == 4 and len(ft) == 2


def test_ties_break_by_smaller_index():
    ft = FreqTable()
    ft.record([8, 2, 5, 8, 5])
    assert ft.top_k(3).tolist() == [5, 8, 2]


def test_rejects_negative_keys():
    with pytest.raises(ValueError):
        FreqTable().record([1, -2])


@pytest.mark.parametrize("name", ["numba", "numpy"])
def test_top_k_matches_sort_oracle_on_zipf_stream(name):
    stream = sample_zipf(np.random.default_rng(7), 50_000, 1.05, 100_000)
    with backend(name):
        ft = FreqTable(16)
        for chunk in np.array_split(stream, 37):
            ft.record(chunk)
    for k in (1, 10, 100, 1000):
        assert np.array_equal(ft.top_k(k), sort_oracle_top(stream, k))
    keys, counts = ft.items()
    oracle = Counter(stream.tolist())
    assert dict(zip(keys.tolist(), counts.tolist())) == oracle


def test_growth_keeps_load_factor_bounded():
    ft = FreqTable(2)
    seen = []
    for start in range(0, 20_000, 500):
        ft.record(np.arange(start, start + 500))
        seen.append(ft.load_factor)
        assert ft.capacity & (ft.capacity - 1) == 0
    assert max(seen) <= MAX_LOAD
    assert len(ft) == 20_000
    assert np.all(ft.get(np.arange(20_000)) == 1)


def test_decay_floors_and_drops():
    ft = FreqTable()
    ft.record([1] * 10 + [2] * 3 + [3])
    ft.decay(0.5)
    assert ft[1] == 5 and ft[2] == 1 and ft[3] == 0 and len(ft) == 2
    with pytest.raises(ValueError):
        ft.decay(1.5)


def test_dense_view():
    ft = FreqTable()
    ft.record([0, 4, 4])
    assert ft.dense(6).tolist() == [1, 0, 0, 0, 2, 0]


@given(st.lists(st.integers(0, 2**40), max_size=300))
def test_backends_agree(keys):
    tables = {}
    for name in ("numba", "numpy"):
        with backend(name):
            ft = FreqTable(2)
            ft.record(keys)
            tables[name] = ft.items()
    assert all(np.array_equal(a, b) for a, b in zip(tables["numba"], tables["numpy"]))
    assert dict(zip(*map(np.ndarray.tolist, tables["numba"]))) == dict(Counter(keys))
