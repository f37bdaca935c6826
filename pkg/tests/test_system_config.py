import logging

import pytest

from system_config import (
    ConfigError, ConfigManager, RunConfig, derive_seed, expand_dotted, setup_logging,
)


def _write_yaml(tmp_path, text):
    path = tmp_path / "config.yaml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_are_complete():
    cfg = ConfigManager().config
    assert cfg.horizons.t_h == 10 and cfg.horizons.t_f == 30
    assert cfg.train.batch_size == 64
    assert cfg.attribution.sigma == 10.0
    assert cfg.attribution.sweep_sigmas == [0.0, 10.0, 20.0, 30.0, 40.0, 50.0]
    assert cfg.checkpoint_path.name == 'model.joblib'
    assert cfg.dataset_path.parent == cfg.output_dir


def test_dotted_keys_from_file(tmp_path):
    path = _write_yaml(tmp_path, "train.batch_size: 8\nattribution:\n  sigma: 2.5\nseed: 7\n")
    cfg = ConfigManager(path).config
    assert cfg.train.batch_size == 8
    assert cfg.attribution.sigma == 2.5
    assert cfg.seed == 7


def test_expand_dotted_merges_sections():
    nested = expand_dotted({'model.hidden_dim': 8, 'model': {'num_layers': 1}, 'seed': 1})
    assert nested == {'model': {'hidden_dim': 8, 'num_layers': 1}, 'seed': 1}
    with pytest.raises(ConfigError):
        expand_dotted({'seed': 1, 'seed.value': 2})


def test_unknown_key_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key 'train.batchsize'"):
        ConfigManager(_write_yaml(tmp_path, "train.batchsize: 8\n"))


@pytest.mark.parametrize("overrides", [
    {'model.hidden_dim': 7},
    {'model.num_heads': 2},
    {'horizons.hz': 25},
    {'horizons.t_h': 1},
    {'split.test_fraction': 1.0},
    {'attribution.sweep_sigmas': []},
])
def test_invalid_values_are_rejected(overrides):
    with pytest.raises(ConfigError):
        ConfigManager(overrides=overrides)


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ConfigManager(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError):
        ConfigManager(_write_yaml(tmp_path, "- just\n- a list\n"))


def test_command_line_flags_override_file(tmp_path):
    manager = ConfigManager(_write_yaml(tmp_path, "seed: 3\njobs: 2\n"))
    cfg = manager.apply_overrides(seed=11, output_dir=str(tmp_path / "out"), jobs=None)
    assert cfg.seed == 11 and cfg.jobs == 2
    assert cfg.checkpoint_path == tmp_path / "out" / "model.joblib"


def test_config_hash_tracks_content():
    a = ConfigManager(overrides={'seed': 1})
    b = ConfigManager(overrides={'seed': 1})
    c = ConfigManager(overrides={'seed': 2})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(5, 'train') == derive_seed(5, 'train')
    streams = {derive_seed(5, s) for s in ('train', 'split', 'baseline', 'synth')}
    assert len(streams) == 4
    assert derive_seed(5, 'train') != derive_seed(6, 'train')


def test_validate_config_checks_inputs(tmp_path):
    manager = ConfigManager(overrides={'paths.output_dir': str(tmp_path)})
    with pytest.raises(ConfigError, match="paths.tracks"):
        manager.validate_config('ingest')
    with pytest.raises(ConfigError):
        manager.validate_config('evaluate')
    assert manager.validate_config('synth')

    missing = ConfigManager(overrides={'cross.scenarios': [str(tmp_path / "nowhere")]})
    with pytest.raises(ConfigError, match="lacks tracks.csv"):
        missing.validate_config('cross')


def test_run_config_is_frozen():
    cfg = RunConfig()
    with pytest.raises(Exception):
        cfg.seed = 4


def test_setup_logging_levels(monkeypatch):
    root = logging.getLogger()
    previous = root.level
    try:
        monkeypatch.setenv('VECPROBE_LOG', 'debug')
        assert setup_logging() == logging.DEBUG
        assert setup_logging('warning') == logging.WARNING
        with pytest.raises(ConfigError, match="invalid log level"):
            setup_logging('chatty')
    finally:
        root.setLevel(previous)
