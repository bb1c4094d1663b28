import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_table
from oracles import digits_of, scalar_matrix
from ttrec.core import (
    KAGGLE_COL_FACTORS,
    KAGGLE_TABLES,
    IndexOutOfRange,
    PlanError,
    ShapePlan,
    TtTable,
    decompose_index,
    decompose_indices,
    memory_reduction,
    parameter_count,
    plan_shapes,
    reconstruct_full,
    recompose_index,
)
from ttrec.ops import lookup_rows

# Kaggle table dimensions with parameter counts and memory reductions for
# R = 16, 32, 64 (reference values).
TABLE2 = [
    (10131227, (200, 220, 250), (135040, 495360, 1891840), (1200, 327, 86)),
    (8351593, (200, 200, 209), (122176, 449152, 1717504), (1094, 297, 78)),
    (7046547, (200, 200, 200), (121600, 448000, 1715200), (927, 252, 66)),
    (5461306, (166, 175, 188), (106944, 393088, 1502976), (817, 222, 58)),
    (2202608, (125, 130, 136), (79264, 291648, 1115776), (445, 121, 32)),
    (286181, (53, 72, 75), (43360, 160448, 615808), (106, 28, 7)),
    (142572, (50, 52, 55), (31744, 116736, 446464), (72, 19, 5)),
]
RANKS = (16, 32, 64)
TABLE2_CASES = [(rows, f, r, p[k], red[k]) for rows, f, p, red in TABLE2 for k, r in enumerate(RANKS)]


def _case_id(case):
    return f"{case[0]}-R{case[2]}"


# ------------------------------------------------------------- Kaggle table


def test_kaggle_constants_match_typed_table():
    assert [(r, f) for r, f, _, _ in TABLE2] == list(KAGGLE_TABLES)
    assert KAGGLE_COL_FACTORS == (2, 2, 4)


@pytest.mark.parametrize("case", TABLE2_CASES, ids=_case_id)
def test_table2_core_shapes_and_parameter_count(case):
    rows, factors, rank, params, _ = case
    plan = plan_shapes(rows, 16, 3, rank, factors, KAGGLE_COL_FACTORS)
    m1, m2, m3 = factors
    assert plan.core_shapes == [(1, m1, 2, rank), (rank, m2, 2, rank), (rank, m3, 4, 1)]
    assert parameter_count(plan) == params


@pytest.mark.parametrize("case", TABLE2_CASES, ids=_case_id)
def test_table2_memory_reduction(case):
    rows, factors, rank, _, reduction = case
    plan = plan_shapes(rows, 16, 3, rank, factors, KAGGLE_COL_FACTORS)
    assert memory_reduction(plan) == reduction


def test_memory_reduction_rounds_half_away_from_zero(rng):
    # exact rational oracle: floor(x + 1/2) for positive x
    for _ in range(300):
        d = int(rng.integers(2, 4))
        f = rng.integers(1, 30, size=d).tolist()
        cols = rng.integers(1, 4, size=d).tolist()
        rows = int(rng.integers(1, math.prod(f) + 1))
        plan = plan_shapes(rows, math.prod(cols), d, int(rng.integers(1, 5)), f, cols)
        x = Fraction(rows * math.prod(cols), plan.parameter_count)
        assert memory_reduction(plan) == math.floor(x + Fraction(1, 2))
    # exact halves round up: 1 row x 9 cols over 3 + 3 parameters = 1.5
    assert ShapePlan(1, 9, (1, 1), (3, 3), (1, 1, 1)).memory_reduction == 2
    assert ShapePlan(3, 1, (1, 3), (1, 1), (1, 1, 1)).memory_reduction == 1  # 0.75


# ------------------------------------------------------------ plan examples


def test_plan_first_kaggle_table_r16():
    plan = plan_shapes(10131227, 16, 3, 16, [200, 220, 250], [2, 2, 4])
    assert plan.core_shapes == [(1, 200, 2, 16), (16, 220, 2, 16), (16, 250, 4, 1)]
    assert plan.parameter_count == 135040


def test_plan_last_kaggle_table_r64():
    assert plan_shapes(142572, 16, 3, 64, [50, 52, 55], [2, 2, 4]).parameter_count == 446464


def test_plan_rank_one_hand_count():
    plan = plan_shapes(4, 4, 2, 1, [2, 2], [2, 2])
    assert plan.parameter_count == 1 * 2 * 2 * 1 + 1 * 2 * 2 * 1 == 8
    assert plan.ranks == (1, 1, 1)


def test_plan_ranks_are_uniform_inside():
    plan = plan_shapes(1000, 16, 4, 5)
    assert plan.ranks == (1, 5, 5, 5, 1)


@pytest.mark.parametrize("kwargs, message", [
    (dict(num_rows=100, emb_dim=7, tt_dim=3, rank=4), "cannot be split"),
    (dict(num_rows=100, emb_dim=16, tt_dim=3, rank=4, row_factors=[4, 4, 4]), "cover"),
    (dict(num_rows=100, emb_dim=16, tt_dim=3, rank=4, row_factors=[5, 5, 4], col_factors=[2, 2, 2]), "multiply"),
    (dict(num_rows=100, emb_dim=16, tt_dim=3, rank=0), "rank"),
    (dict(num_rows=100, emb_dim=16, tt_dim=1, rank=2), "tt_dim"),
    (dict(num_rows=100, emb_dim=16, tt_dim=3, rank=2, row_factors=[10, 10]), None),
])
def test_plan_rejects_invalid(kwargs, message):
    with pytest.raises(PlanError, match=message):
        plan_shapes(**kwargs)


def test_shape_plan_rejects_non_unit_boundary_ranks():
    with pytest.raises(PlanError, match="boundary"):
        ShapePlan(4, 4, (2, 2), (2, 2), (2, 1, 1))


def test_plan_dict_round_trip():
    plan = plan_shapes(2202608, 16, 3, 16, [125, 130, 136], [2, 2, 4])
    assert ShapePlan.from_dict(plan.to_dict()) == plan
    assert plan.memory_reduction == 445 and plan.parameter_count == 79264


@pytest.mark.parametrize("rows", np.unique(np.logspace(3, 8, 120).astype(np.int64)).tolist())
@pytest.mark.parametrize("d", [2, 3, 4])
def test_auto_factorization_bounds(rows, d):
    plan = plan_shapes(rows, 16, d, 4)
    f = plan.row_factors
    assert math.prod(f) >= rows
    assert max(f) / min(f) <= 4


@given(st.integers(1000, 10**8), st.sampled_from([2, 3, 4]))
def test_auto_factorization_bounds_property(rows, d):
    f = plan_shapes(rows, 16, d, 2).row_factors
    assert math.prod(f) >= rows and max(f) / min(f) <= 4


def test_auto_factorization_is_tight_for_small_tables():
    # brute force: no balanced (ratio <= 4) factorization has a smaller product
    for rows in (1000, 1234, 4099, 10007):
        f = plan_shapes(rows, 16, 2, 2).row_factors
        best = min(a * b for a in range(1, rows + 1) for b in range(a, min(4 * a, rows) + 1) if a * b >= rows)
        assert math.prod(f) == best


def test_auto_col_factors_balanced():
    assert sorted(plan_shapes(1000, 16, 3, 2).col_factors) == [2, 2, 4]
    assert sorted(plan_shapes(1000, 64, 3, 2).col_factors) == [4, 4, 4]


# ---------------------------------------------------------- index digits


def test_decompose_examples():
    f = [200, 220, 250]
    assert decompose_index(0, f) == (0, 0, 0)
    assert decompose_index(55000, f) == (1, 0, 0)
    expected = tuple(digits_of(10131226, f))
    assert expected == (184, 44, 226)
    assert decompose_index(10131226, f) == expected
    assert recompose_index(expected, f) == 10131226


def test_decompose_out_of_range_names_table_and_index():
    with pytest.raises(IndexOutOfRange, match=r"emb3.*11000000"):
        decompose_index(11_000_000, [200, 220, 250], table="emb3")
    with pytest.raises(IndexOutOfRange):
        decompose_index(-1, [2, 2])


def test_round_trip_ten_thousand_random(rng):
    for _ in range(20):
        d = int(rng.integers(2, 6))
        f = rng.integers(1, 40, size=d).tolist()
        flat = rng.integers(0, math.prod(f), size=500)
        digits = decompose_indices(flat, f)
        assert np.all(digits < np.array(f)) and np.all(digits >= 0)
        strides = [math.prod(f[k + 1:]) for k in range(d)]
        assert np.array_equal(digits @ np.array(strides), flat)
        for i in flat[:25].tolist():
            assert recompose_index(decompose_index(i, f), f) == i
            assert list(decompose_index(i, f)) == digits_of(i, f)


@given(st.lists(st.integers(1, 30), min_size=2, max_size=5), st.data())
def test_round_trip_property(f, data):
    i = data.draw(st.integers(0, math.prod(f) - 1))
    digits = decompose_index(i, f)
    assert recompose_index(digits, f) == i
    assert all(0 <= x < m for x, m in zip(digits, f))


# ------------------------------------------------------ reconstruct_full


def test_reconstruct_all_ones_rank_one():
    plan = plan_shapes(6, 4, 2, 1, [2, 3], [2, 2])
    table = TtTable.full(plan, 1.0, np.float64)
    assert np.array_equal(reconstruct_full(table), np.ones((6, 4)))


def test_reconstruct_identity_like_first_core():
    # G1[:, i, j, :] = e_{2i+j}; the matrix is then the unfolded second core
    plan = ShapePlan(4, 4, (2, 2), (2, 2), (1, 4, 1))
    g1 = np.zeros((1, 2, 2, 4))
    for i in range(2):
        for j in range(2):
            g1[0, i, j, 2 * i + j] = 1.0
    g2 = np.arange(4 * 2 * 2, dtype=np.float64).reshape(4, 2, 2, 1)
    full = reconstruct_full(TtTable(plan, [g1, g2]))
    # row (i1, i2), column (j1, j2) -> g2[2*i1 + j1, i2, j2, 0]
    expected = np.empty((4, 4))
    for i1 in range(2):
        for i2 in range(2):
            for j1 in range(2):
                for j2 in range(2):
                    expected[2 * i1 + i2, 2 * j1 + j2] = g2[2 * i1 + j1, i2, j2, 0]
    assert np.array_equal(full, expected)


def test_reconstruct_matches_scalar_loop(rng):
    table = random_table(rng, (4, 4, 4), (2, 2, 2), 3)
    oracle = scalar_matrix(table.cores, 64, (4, 4, 4), (2, 2, 2))
    np.testing.assert_allclose(reconstruct_full(table), oracle, rtol=1e-13, atol=1e-15)


def test_reconstruct_size_guard():
    plan = plan_shapes(10131227, 16, 3, 2, [200, 220, 250], [2, 2, 4])
    with pytest.raises(MemoryError, match="limit"):
        reconstruct_full(TtTable.zeros(plan))


@pytest.mark.parametrize("d, rank", [(2, 1), (2, 8), (3, 2), (4, 2)])
def test_lookup_matches_reconstruction_every_row(rng, d, rank):
    f = [3, 4, 5, 2][:d]
    cols = [2, 2, 1, 2][:d]
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-5)):
        table = random_table(rng, f, cols, rank, dtype)
        full = reconstruct_full(table.astype(np.float64))
        rows = lookup_rows(table, np.arange(table.num_rows))
        err = np.max(np.abs(rows - full)) / np.max(np.abs(full))
        assert err <= tol


# ------------------------------------------------------------- TtTable


def test_core_slice_is_a_view(rng):
    table = random_table(rng, (3, 4, 5), (2, 2, 2), 3)
    for k in range(3):
        s = table.core_slice(k, 1)
        r0, _, n, r1 = table.cores[k].shape
        assert s.shape == (r0, n * r1)
        assert np.shares_memory(s, table.cores[k])
        assert np.array_equal(s, table.cores[k][:, 1].reshape(r0, n * r1))


def test_table_element_count_matches_plan(rng):
    table = random_table(rng, (3, 4, 5), (2, 2, 4), 6)
    assert sum(c.size for c in table.cores) == table.plan.parameter_count


def test_table_rejects_wrong_shapes_and_dtypes():
    plan = plan_shapes(4, 4, 2, 1, [2, 2], [2, 2])
    with pytest.raises(PlanError):
        TtTable(plan, [np.zeros((1, 2, 2, 1))])
    with pytest.raises(TypeError):
        TtTable(plan, [np.zeros((1, 2, 2, 1), dtype=np.int32)] * 2)


def test_check_index_rejects_padding_rows():
    plan = plan_shapes(5, 4, 2, 1, [2, 3], [2, 2])
    table = TtTable.zeros(plan)
    table.check_index(4)
    with pytest.raises(IndexOutOfRange):
        table.check_index(5)
