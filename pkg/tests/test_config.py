"""Run-config schema: defaults, overrides, strict key checking."""

import json

import pytest

from dmbn.config import ConfigError, load_config, parse_config


def test_defaults_match_reference_setup():
    cfg = parse_config({})
    assert cfg.model.pos_layer_dims == (128,) * 5
    assert cfg.model.neg_layer_dims == (128,) * 4
    assert cfg.model.heads == 4
    assert cfg.train.k_folds == 5
    assert cfg.loss.mu1 == 1.0 and cfg.loss.mu2 == 0.5
    assert cfg.model.gamma == 0.0
    assert cfg.model.include_self is True


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown config section"):
        parse_config({"optimizer": {}})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="train.epoch_count"):
        parse_config({"train": {"epoch_count": 5}})


def test_wrong_type_rejected():
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config({"train": {"epochs": "many"}})
    with pytest.raises(ConfigError, match="model.pos_layer_dims"):
        parse_config({"model": {"pos_layer_dims": [8, "x"]}})


def test_semantic_validation():
    with pytest.raises(ConfigError):
        parse_config({"train": {"k_folds": 1}})
    with pytest.raises(ConfigError):
        parse_config({"model": {"pos_layer_dims": [9], "heads": 2}})
    with pytest.raises(ConfigError):
        parse_config({"loss": {"mu1": -2.0}})


def test_ablation_flags_propagate_to_model():
    cfg = parse_config({"ablation": {"no_attention": True}})
    assert cfg.model.no_attention is True


def test_gamma_shared_between_model_and_loss():
    cfg = parse_config({"model": {"gamma": 0.25}})
    assert cfg.loss.gamma == 0.25


def test_load_from_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"epochs": 7}}))
    cfg = load_config(path)
    assert cfg.train.epochs == 7


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)


def test_round_trip_to_dict():
    cfg = parse_config({"train": {"epochs": 11}, "loss": {"mu2": 0.25}})
    doc = cfg.to_dict()
    again = parse_config(doc)
    assert again.to_dict() == doc
