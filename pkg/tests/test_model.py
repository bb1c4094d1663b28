import numpy as np
import pytest

from oracles import central_difference, rel_err
from ttrec.core import plan_shapes
from ttrec.data import Batch, SyntheticSource
from ttrec.model import (
    DlrmModel,
    Interaction,
    Metrics,
    ModelConfig,
    TableConfig,
    TrainConfig,
    TrainingDiverged,
    toy_model_config,
    train,
)
from ttrec.ops import IndexBatch


def micro_config(interaction, cache_pct=0.0):
    tt = TableConfig(16, True, plan_shapes(16, 4, 2, 2, [4, 4], [2, 2]), cache_pct)
    return ModelConfig([tt, TableConfig(10, False)], dense_features=3, emb_dim=4,
                       bottom_mlp=[4], top_mlp=[3], interaction=interaction)


def micro_batch(rng, size=6):
    bags16 = [rng.integers(0, 16, size=2).tolist() for _ in range(size)]
    bags10 = [rng.integers(0, 10, size=1).tolist() for _ in range(size)]
    return Batch(rng.standard_normal((size, 3)), [IndexBatch.from_bags(bags16), IndexBatch.from_bags(bags10)],
                 rng.integers(0, 2, size=size).astype(np.float64))


def small_source(seed=0, batch_size=32):
    return SyntheticSource([500, 800], batch_size, seed=seed, hot_rows=4)


def small_config(cache_pct=0.0, use_tt=True):
    return ModelConfig([TableConfig(500, use_tt, None, cache_pct), TableConfig(800, use_tt, None, cache_pct)],
                       tt_rank=4)


@pytest.mark.parametrize("interaction", list(Interaction))
def test_gradients_match_finite_differences(rng, interaction):
    model = DlrmModel(micro_config(interaction), seed=1, dtype="float64")
    batch = micro_batch(rng)
    _, _, grads = model.loss_and_gradients(batch)
    analytic = model.named_gradients(grads)
    params = model.parameters()
    assert set(analytic) == set(params)
    names = sorted(params)
    numeric = central_difference(lambda: model.loss(batch), [params[n] for n in names], h=1e-6)
    for name, num in zip(names, numeric):
        assert rel_err(analytic[name], num) <= 1e-5, name


def test_zero_learning_rate_keeps_loss_constant():
    src = small_source()
    batch = src.next_batch()
    metrics, _ = train(small_config(), TrainConfig(lr=0.0, iterations=5, seed=0), iter([batch] * 5))
    assert len(set(metrics.loss)) == 1


def test_training_reduces_loss():
    metrics, _ = train(small_config(), TrainConfig(lr=0.5, iterations=300, seed=0), small_source())
    assert np.mean(metrics.loss[-50:]) < np.mean(metrics.loss[:50])


def test_parameter_accounting():
    dense = DlrmModel(small_config(use_tt=False))
    tt = DlrmModel(small_config())
    mlp = sum(p.size for n, p in tt.parameters().items() if not n.startswith("emb"))
    assert dense.parameter_count() == mlp + (500 + 800) * 16
    cores = sum(c.size for t in tt.tt_tables().values() for c in t.cores)
    assert tt.parameter_count() == mlp + cores
    # switching any single table from dense to TT strictly lowers the count
    for t in range(2):
        tables = [TableConfig(500, False), TableConfig(800, False)]
        tables[t] = TableConfig(tables[t].num_rows, True)
        mixed = DlrmModel(ModelConfig(tables, tt_rank=4))
        assert mixed.parameter_count() < dense.parameter_count()


def test_cache_rows_are_not_counted_as_parameters():
    assert DlrmModel(small_config(5.0)).parameter_count() == DlrmModel(small_config()).parameter_count()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig([TableConfig(10)], bottom_mlp=[8])
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(refresh_period=0)


def test_interaction_dims():
    assert toy_model_config().interaction_dim == 16 + 10
    assert toy_model_config(interaction=Interaction.CONCAT).interaction_dim == 16 * 5


def test_stage_events():
    tc = TrainConfig(iterations=2000, warmup_fraction=0.1, refresh_period=500)
    assert tc.stage_events() == {200: "finalize", 700: "refresh", 1200: "refresh", 1700: "refresh"}
    assert TrainConfig(iterations=10, warmup_fraction=0.0).stage_events() == {0: "finalize"}


def test_training_is_deterministic():
    runs = [train(small_config(1.0), TrainConfig(iterations=60, warmup_fraction=0.2, refresh_period=20,
                                                 seed=3), small_source(3))[0] for _ in range(2)]
    assert runs[0].to_csv() == runs[1].to_csv()
    assert runs[0].hit_rate[-1] > 0


def test_cache_schedule_during_training():
    _, model = train(small_config(1.0), TrainConfig(iterations=30, warmup_fraction=0.5, refresh_period=10),
                     small_source())
    for cache in model.caches():
        assert len(cache) == cache.capacity_rows


def test_metrics_csv_layout():
    m = Metrics([0.5, 0.25], [0.5, 0.75], [0.0, 0.1], [1.0, 2.0])
    assert m.to_csv().splitlines() == [
        "iter,loss,accuracy,hit_rate,ms_per_iter", "0,0.5,0.5,0,", "1,0.25,0.75,0.1,"]
    assert m.to_csv(include_timing=True).splitlines()[1].endswith(",1.0000")


def test_divergence_guard():
    src = small_source()
    batch = src.next_batch()
    batch.dense[0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train(small_config(), TrainConfig(iterations=3), iter([batch] * 3))


def test_evaluation_does_not_touch_cache_counters():
    _, model = train(small_config(2.0), TrainConfig(iterations=20, warmup_fraction=0.5), small_source())
    cache = model.caches()[0]
    before = (cache.freq.items(), cache.hits, cache.lookups)
    model.evaluate(small_source().holdout(200))
    after = (cache.freq.items(), cache.hits, cache.lookups)
    assert all(np.array_equal(a, b) for a, b in zip(before[0], after[0])) and before[1:] == after[1:]


def test_save_load_round_trip(tmp_path):
    _, model = train(small_config(2.0), TrainConfig(iterations=20, warmup_fraction=0.5), small_source())
    path = tmp_path / "m.ttrec"
    model.save(path, {"note": "x"})
    fresh = DlrmModel(small_config(2.0), seed=99)
    header = fresh.load(path)
    assert header["meta"] == {"note": "x"}
    for name, value in model.parameters().items():
        assert np.array_equal(fresh.parameters()[name], value), name
    holdout = small_source().holdout(300)
    assert np.array_equal(fresh.predict(holdout), model.predict(holdout))
    with pytest.raises(ValueError):
        DlrmModel(ModelConfig([TableConfig(500, False), TableConfig(800, False)])).load(path)
