import json

import pytest

from mdprune.config import (ConfigError, DEFAULT_CONFIG, load_config,
                            prune_config, validate_config)


def write_cfg(tmp_path, doc):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


def test_defaults_load_from_empty_file(tmp_path):
    cfg = load_config(write_cfg(tmp_path, {}))
    assert cfg == DEFAULT_CONFIG


def test_overrides_merge_deeply(tmp_path):
    cfg = load_config(write_cfg(tmp_path, {"search": {"rho": 0.5}}))
    assert cfg["search"]["rho"] == 0.5
    assert cfg["search"]["lambda"] == DEFAULT_CONFIG["search"]["lambda"]


def test_unknown_key_reports_dotted_path(tmp_path):
    with pytest.raises(ConfigError, match="search.momentum"):
        load_config(write_cfg(tmp_path, {"search": {"momentum": 0.9}}))
    with pytest.raises(ConfigError, match="unknown config key: turbo"):
        load_config(write_cfg(tmp_path, {"turbo": True}))


def test_invalid_json_is_a_config_error(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)


def test_validation_catches_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="sparsity"):
        load_config(write_cfg(tmp_path, {"export": {"sparsities": [1.5]}}))
    with pytest.raises(ConfigError, match="scope"):
        load_config(write_cfg(tmp_path, {"export": {"scope": "everywhere"}}))
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, {"search": {"pattern": [2]}}))
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, {"search": {"alpha": -0.1}}))


def test_prune_config_mapping():
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    cfg["search"]["pattern"] = [2, 4]
    pc = prune_config(cfg, alpha=0.01)
    assert pc.pattern == (2, 4)
    assert pc.lam == cfg["search"]["lambda"]
    assert pc.metric.kind == "stochria"
    with pytest.raises(ConfigError, match="auto"):
        prune_config(cfg)


def test_missing_corpus_source_rejected():
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    cfg["corpus"]["generator"] = None
    with pytest.raises(ConfigError, match="missing input"):
        validate_config(cfg)
