"""Run-config parsing tests."""

import pytest

from tjepa.config import RunConfig, echo_config, load_run_config, parse_run_config
from tjepa.errors import ConfigError

GOOD = """\
# smoke config
seed = 7
grid.min_lon = 0.0
grid.min_lat = 0.0
grid.max_lon = 4.0
grid.max_lat = 4.0
grid.cell_size_m = 1.0
grid.planar = true
model.d = 16
model.enc_heads = 2
model.pred_heads = 2
model.target_ratios = 0.1, 0.2, 0.3   # inline comment
train.lr = 0.0001
eval.measure = hausdorff
paths.run_dir = runs/a
"""


def test_parse_types_and_comments():
    cfg = parse_run_config(GOOD)
    assert cfg.get("seed") == 7
    assert cfg.get("grid.planar") is True
    assert cfg.get("model.target_ratios") == (0.1, 0.2, 0.3)
    assert cfg.get("train.lr") == 1e-4
    assert cfg.get("paths.run_dir") == "runs/a"
    assert cfg.get("eval.k") is None
    assert cfg.get("eval.k", 5) == 5


def test_parse_rejects_unknown_duplicate_and_malformed():
    with pytest.raises(ConfigError, match="unknown key 'grid.size'"):
        parse_run_config("grid.size = 3")
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_run_config("seed = 1\nseed = 2")
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_run_config("just some words")
    with pytest.raises(ConfigError, match="cannot parse 'abc' as int"):
        parse_run_config("seed = abc")
    with pytest.raises(ConfigError, match="expected true or false"):
        parse_run_config("grid.planar = yes")
    with pytest.raises(ConfigError, match="comma-separated"):
        parse_run_config("eval.levels = ")


def test_accessors_guard_keys():
    cfg = parse_run_config("seed = 3")
    with pytest.raises(ConfigError, match="unknown config key"):
        cfg.get("nope.nope")
    with pytest.raises(ConfigError, match="missing required"):
        cfg.require("grid.min_lon")


def test_seed_env_override(monkeypatch):
    cfg = parse_run_config("seed = 3")
    assert cfg.seed() == 3
    monkeypatch.setenv("TJEPA_SEED", "41")
    assert cfg.seed() == 41
    monkeypatch.setenv("TJEPA_SEED", "not-a-number")
    with pytest.raises(ConfigError, match="TJEPA_SEED"):
        cfg.seed()


def test_typed_section_builders():
    cfg = parse_run_config(GOOD)
    grid = cfg.grid()
    assert (grid.n_cols, grid.n_rows) == (4, 4) and grid.planar
    model = cfg.model_config()
    assert model.d == 16 and model.target_ratios == (0.1, 0.2, 0.3)
    assert model.enc_layers == 3  # untouched defaults stay
    train = cfg.train_config(warm_start="w.ckpt")
    assert train.lr == 1e-4 and train.seed == 7 and train.warm_start == "w.ckpt"
    kind = cfg.measure_kind()
    assert kind.kind == "hausdorff" and kind.planar


def test_context_ratio_bounds_must_come_in_pairs():
    cfg = parse_run_config("model.context_ratio_min = 0.8")
    with pytest.raises(ConfigError, match="both"):
        cfg.model_config()
    cfg = parse_run_config("model.context_ratio_min = 0.8\nmodel.context_ratio_max = 0.9")
    assert cfg.model_config().context_ratio_range == (0.8, 0.9)


def test_load_and_echo_roundtrip(tmp_path):
    src = tmp_path / "run.cfg"
    src.write_text(GOOD)
    cfg = load_run_config(str(src))
    out = echo_config(cfg, str(tmp_path / "run_dir"))
    assert open(out).read() == GOOD
    with pytest.raises(ConfigError, match="cannot read config"):
        load_run_config(str(tmp_path / "missing.cfg"))
