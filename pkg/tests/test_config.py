import pytest
from hypothesis import given, strategies as st

from simsid.config import ConfigError, RunConfig, parse_value, read_config_file, resolve
from simsid.training import LossWeights, TrainConfig


def test_defaults_echo_training_defaults():
    cfg = RunConfig()
    tc = cfg.train_config()
    ref = TrainConfig()
    for name in ("epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "gen_period", "grid", "items",
                 "top_k", "translate", "scale_range", "patience", "memory_lr_scale"):
        assert getattr(tc, name) == getattr(ref, name), name
    assert tc.weights == LossWeights()


def test_precedence_defaults_file_env_flags(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nepochs = 7\nseed = 1\nlr_max = 0.5  # trailing\n")
    cfg = resolve(f, {"epochs": "9"}, env={"SIMSID_SEED": "42"})
    assert (cfg.epochs, cfg.seed, cfg.lr_max, cfg.batch_size) == (9, 42, 0.5, 16)
    cfg = resolve(f, {"seed": "3"}, env={"SIMSID_SEED": "42"})
    assert cfg.seed == 3


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        resolve(None, {"epoch": "3"}, env={})
    f = tmp_path / "bad.cfg"
    f.write_text("nonsense = 1\n")
    with pytest.raises(ConfigError):
        read_config_file(f)


def test_malformed_line(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("epochs 3\n")
    with pytest.raises(ConfigError, match="key = value"):
        read_config_file(f)


@pytest.mark.parametrize("text,expect", [("4x4", (4, 4)), ("2,8", (2, 8)), ("1", (1, 1))])
def test_grid_forms(text, expect):
    assert parse_value("grid", text) == expect


def test_bad_values():
    with pytest.raises(ConfigError):
        parse_value("epochs", "many")
    with pytest.raises(ConfigError):
        parse_value("force", "perhaps")


def test_resolved_text_round_trips(tmp_path):
    cfg = resolve(None, {"grid": "2x2", "lambda_s": "3.5", "force": "true", "data": "some/dir"}, env={})
    f = tmp_path / "resolved.cfg"
    f.write_text(cfg.to_text())
    assert resolve(f, env={}) == cfg


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5, allow_nan=False))
def test_text_round_trip_property(seed, contamination):
    cfg = RunConfig(seed=seed, contamination=contamination)
    values = {k: parse_value(k, line.split("=", 1)[1]) for k, line in
              ((ln.split("=", 1)[0].strip(), ln) for ln in cfg.to_text().splitlines())}
    assert RunConfig(**values) == cfg
