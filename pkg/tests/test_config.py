import pytest

from ttrec.config import ConfigError, build_run_config, load_run_config
from ttrec.model import TOY_LR, TOY_TABLE_SIZES, Interaction


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_defaults_are_the_toy_setup():
    run = load_run_config()
    assert [t.num_rows for t in run.model.tables] == list(TOY_TABLE_SIZES)
    assert all(t.use_tt for t in run.model.tables)
    assert run.train.lr == TOY_LR and run.data.holdout == 10_000


def test_file_values_and_per_table_lists(tmp_path):
    path = write(tmp_path, """
[model]
tables = 100, 200   # two tables
use_tt = true, false
cache_pct = 2
interaction = concat
rank = 4
[train]
iterations = 7
[data]
zipf_s = 0.5
""")
    run = load_run_config(path)
    t0, t1 = run.model.tables
    assert (t0.num_rows, t0.use_tt, t0.cache_capacity_pct) == (100, True, 2.0)
    assert (t1.num_rows, t1.use_tt, t1.cache_capacity_pct) == (200, False, 0.0)
    assert run.model.interaction is Interaction.CONCAT and run.model.tt_rank == 4
    assert run.train.iterations == 7 and run.data.zipf_s == 0.5


def test_overrides_win(tmp_path):
    path = write(tmp_path, "[train]\nseed = 1\nlr = 0.1\n")
    run = load_run_config(path, {"train": {"seed": 5, "lr": None}})
    assert run.train.seed == 5 and run.train.lr == 0.1


@pytest.mark.parametrize("values, match", [
    ({"model": {"colour": "red"}}, "unknown key"),
    ({"extra": {}}, "unknown section"),
    ({"model": {"use_tt": "maybe"}}, "boolean"),
    ({"model": {"tables": "1,2,3", "use_tt": "true,false"}}, "expected 1 or 3"),
    ({"data": {"source": "parquet"}}, "data source"),
    ({"data": {"source": "criteo"}}, "path"),
    ({"train": {"lr": "fast"}}, None),
])
def test_errors(values, match):
    with pytest.raises(ConfigError, match=match):
        build_run_config(values)


def test_syntax_error_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(write(tmp_path, "no section header\n"))
