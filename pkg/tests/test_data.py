import math
import threading

import numpy as np
import pytest

from ttrec.data import (
    CRITEO_CATEGORICAL,
    CriteoFormatError,
    PlantedTeacher,
    SyntheticSource,
    criteo_batches,
    generate_zipfian_batch,
    hash_token,
    ingest_criteo_csv,
    prefetch,
    sample_zipf,
    zipf_probabilities,
)
from ttrec.ops import IndexBatch

HASH = [1000] * CRITEO_CATEGORICAL


def criteo_line(label="1", dense=None, cats=None, sep="\t"):
    dense = dense if dense is not None else [str(k) for k in range(13)]
    cats = cats if cats is not None else [f"{k:08x}" for k in range(26)]
    return sep.join([label, *dense, *cats])


def test_s_zero_is_uniform():
    x = sample_zipf(np.random.default_rng(0), 10, 0.0, 100_000)
    freq = np.bincount(x, minlength=10) / len(x)
    assert np.all(np.abs(freq - 0.1) <= 3 * math.sqrt(0.09 / len(x)))


def test_top_row_frequency_matches_harmonic_normalizer():
    rows, s, n = 1000, 1.05, 10**6
    x = sample_zipf(np.random.default_rng(1), rows, s, n)
    p0 = 1 / sum(k ** -s for k in range(1, rows + 1))
    assert abs(np.mean(x == 0) - p0) <= 3 * math.sqrt(p0 * (1 - p0) / n)
    assert zipf_probabilities(rows, s)[0] == pytest.approx(p0, rel=1e-12)


def test_sampled_histogram_matches_probabilities():
    rows, n = 50, 200_000
    x = sample_zipf(np.random.default_rng(2), rows, 1.2, n)
    p = zipf_probabilities(rows, 1.2)
    freq = np.bincount(x, minlength=rows) / n
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n))


def test_negative_exponent_rejected():
    with pytest.raises(ValueError):
        sample_zipf(np.random.default_rng(0), 5, -1.0, 3)


def test_batch_shapes_and_offsets():
    batch = generate_zipfian_batch(np.random.default_rng(0), [100, 7], 1.05, 8, pooling_factor=1)
    assert batch.dense.shape == (8, 3) and batch.size == 8
    for sparse, rows in zip(batch.sparse, [100, 7]):
        assert sparse.offsets.tolist() == list(range(9))
        assert sparse.indices.min() >= 0 and sparse.indices.max() < rows
    pooled = generate_zipfian_batch(np.random.default_rng(0), [100], 1.05, 4, pooling_factor=5)
    assert pooled.sparse[0].offsets.tolist() == [0, 5, 10, 15, 20]
    with pytest.raises(ValueError):
        generate_zipfian_batch(np.random.default_rng(0), [100], 1.05, 4, pooling_factor=0)


def test_teacher_labels_follow_the_logit_sign():
    rng = np.random.default_rng(3)
    teacher = PlantedTeacher.random(rng, 3, [20], hot_rows=4)
    assert np.count_nonzero(teacher.row_effects[0]) == 4
    dense = rng.standard_normal((5, 3))
    bags = IndexBatch.from_bags([[0], [1, 2], [19], [3, 3], [0, 19]])
    expected = dense @ teacher.dense_weights
    u = teacher.row_effects[0]
    expected += np.array([u[0], (u[1] + u[2]) / 2, u[19], u[3], (u[0] + u[19]) / 2])
    np.testing.assert_allclose(teacher.logits(dense, [bags]), expected, rtol=1e-14)


def test_synthetic_source_is_seeded():
    a = SyntheticSource([50, 60], 16, seed=4).next_batch()
    b = SyntheticSource([50, 60], 16, seed=4).next_batch()
    c = SyntheticSource([50, 60], 16, seed=5).next_batch()
    assert np.array_equal(a.dense, b.dense) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.dense, c.dense)
    src = SyntheticSource([50], 16, seed=4)
    assert np.array_equal(src.holdout(32).dense, SyntheticSource([50], 16, seed=4).holdout(32).dense)


def test_prefetch_preserves_order_and_stops():
    assert list(prefetch(iter(range(20)), depth=3)) == list(range(20))
    gen = prefetch(iter(range(10**6)), depth=2)
    assert [next(gen) for _ in range(5)] == [0, 1, 2, 3, 4]
    gen.close()
    before = threading.active_count()
    list(prefetch(iter([]), depth=1))
    assert threading.active_count() <= before + 1


# ------------------------------------------------------------------ criteo


def test_criteo_parse(tmp_path):
    dense = ["", "0", "-5", "3"] + ["1"] * 9
    cats = [""] + ["abc"] * 25
    path = tmp_path / "day.tsv"
    path.write_text(criteo_line("0", dense, cats) + "\n" + criteo_line() + "\n")
    recs = list(ingest_criteo_csv(path, HASH))
    assert len(recs) == 2
    r = recs[0]
    assert r.label == 0
    np.testing.assert_array_equal(r.dense[:4], [0.0, 0.0, 0.0, math.log1p(3)])
    assert r.categorical[0] == 0
    assert r.categorical[1] == hash_token("abc", 1, 1000)
    assert np.all((recs[1].categorical >= 1) & (recs[1].categorical < 1000))


def test_comma_separated_input(tmp_path):
    path = tmp_path / "day.csv"
    path.write_text(criteo_line(sep=",") + "\n")
    assert len(list(ingest_criteo_csv(path, HASH))) == 1


def test_hash_is_stable_and_column_salted():
    assert hash_token("abc", 3, 1000) == hash_token("abc", 3, 1000)
    values = {hash_token("abc", k, 10**9) for k in range(26)}
    assert len(values) > 20
    assert hash_token("abc", 0, 1) == 0


def test_malformed_row_skipped_and_counted(tmp_path):
    path = tmp_path / "day.tsv"
    bad = criteo_line(dense=["x"] + ["1"] * 12)
    path.write_text("\n".join([criteo_line(), bad, criteo_line(label="7"), criteo_line()]) + "\n")
    stream = ingest_criteo_csv(path, HASH)
    assert len(list(stream)) == 2
    assert stream.skipped == 2


def test_wrong_column_count_names_the_line(tmp_path):
    path = tmp_path / "day.tsv"
    path.write_text(criteo_line() + "\n" + "1\t2\t3\n")
    with pytest.raises(CriteoFormatError, match=r"day\.tsv:2"):
        list(ingest_criteo_csv(path, HASH))


def test_hash_size_count_checked(tmp_path):
    with pytest.raises(ValueError):
        ingest_criteo_csv(tmp_path / "x", [10])


def test_batches_and_negative_downsampling(tmp_path):
    path = tmp_path / "day.tsv"
    lines = [criteo_line(label=str(k % 2)) for k in range(2000)]
    path.write_text("\n".join(lines) + "\n")
    batches = list(criteo_batches(iter(ingest_criteo_csv(path, HASH)), 300))
    assert [b.size for b in batches] == [300] * 6 + [200]
    assert len(batches[0].sparse) == 26 and batches[0].dense.shape == (300, 13)
    kept = list(criteo_batches(iter(ingest_criteo_csv(path, HASH)), 4000, negative_keep=0.25, seed=1))
    labels = kept[0].labels
    assert labels.sum() == 1000
    negatives = len(labels) - 1000
    assert abs(negatives - 250) <= 3 * math.sqrt(1000 * 0.25 * 0.75)
