import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from ttrec.core import ShapePlan, TtTable  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_table(rng, row_factors, col_factors, rank, dtype=np.float64, num_rows=None):
    d = len(row_factors)
    ranks = (1,) + (rank,) * (d - 1) + (1,)
    plan = ShapePlan(num_rows or int(np.prod(row_factors)), int(np.prod(col_factors)), tuple(row_factors),
                     tuple(col_factors), ranks)
    cores = [(rng.standard_normal(s) / np.sqrt(s[0] * s[3]) ** 0.5).astype(dtype) for s in plan.core_shapes]
    return TtTable(plan, cores)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
