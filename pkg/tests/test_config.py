import pytest

from deepist.config import ConfigError, Settings, TrainConfig, load_settings, parse_pairs, settings_from_pairs


def test_default_hyperparameters():
    s = Settings()
    assert (s.window.window_km, s.window.step_km) == (0.5, 0.4)
    assert (s.raster.k, s.raster.r_lng, s.raster.r_lat) == (100, 0.0058699, 0.0044966)
    assert s.pathcnn.c_2d == (16, 32, 64, 128) and s.pathcnn.lambda_dim == 1024
    assert s.temporal.c_1d == (1024, 1024) and s.temporal.s_max == 50
    assert s.temporal.head_dims == (1024, 1024, 1)
    assert (s.loss.beta, s.loss.gamma1, s.loss.gamma2, s.loss.gamma3) == (0.6, 0.1, 0.1, 0.01)
    assert s.train.learning_rate == 1e-4 and s.train.split == (0.8, 0.1, 0.1)


def test_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nraster.k = 48\ntrain.seed = 3  # trailing\n")
    s = load_settings(cfg, {"train.seed": "9"}, preset="desk")
    assert s.raster.k == 48          # file beats preset
    assert s.train.seed == 9         # override beats file
    assert s.pathcnn.c_2d == (8, 16, 32)  # preset beats default


def test_unknown_and_malformed_keys():
    with pytest.raises(ConfigError):
        Settings().with_overrides({"raster.nope": "1"})
    with pytest.raises(ConfigError):
        Settings().with_overrides({"nosection": "1"})
    with pytest.raises(ConfigError):
        Settings().with_overrides({"raster.k": "many"})
    with pytest.raises(ConfigError):
        parse_pairs(["just words"])
    with pytest.raises(ConfigError):
        load_settings(preset="huge")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        Settings().with_overrides({"train.split": "0.5,0.5,0.5"})
    with pytest.raises(ConfigError):
        Settings().with_overrides({"temporal.head_dims": "4,2"})
    with pytest.raises(ConfigError):
        TrainConfig(dtype="float16")


def test_pairs_round_trip():
    s = load_settings(preset="desk", overrides={"synth.partial_ends": "true", "loss.beta": "0.3"})
    back = settings_from_pairs(s.to_pairs())
    assert back == s
    assert settings_from_pairs(parse_pairs(s.to_text().splitlines())) == s
