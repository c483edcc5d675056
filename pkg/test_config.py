#!/usr/bin/env python3
"""
Tests for run-config loading, overrides and validation.

Run:
    python test_config.py
"""
import json
import sys
import tempfile
from pathlib import Path

from mvssl.config import RunConfig, apply_overrides, config_key_docs, load_run_config, parse_override
from mvssl.errors import ConfigurationError
from utils.file_loader import list_available_configs
from utils.script_runner import run_tests


def _expect_config_error(fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except ConfigurationError as e:
        return e
    raise AssertionError("expected ConfigurationError")


def test_shipped_configs_load():
    assert {"default.yaml", "tiny.yaml"} <= set(list_available_configs())
    default = load_run_config()
    assert default.train.epochs == 200 and default.train.batch_size == 200
    assert default.model.embed_dim == 5 and default.train.loss.lambda_mv_bt == 0.5
    assert default.train.loss.tau == 0.07 and default.eval.folds == 10
    tiny = load_run_config("tiny.yaml")
    assert tiny.data.n_subjects == 6 and tiny.eval.folds == 2
    assert tiny.model.embed_dim == 8


def test_dataclass_defaults_match_the_documented_ones():
    config = RunConfig()
    assert config.train.learning_rate == 1e-4 and config.train.weight_decay == 1e-4
    assert config.train.adam_beta1 == 0.9 and config.train.adam_beta2 == 0.999
    assert config.train.loss.lambda_mv_bt == 5e-3 and config.train.loss.symmetric is False
    assert config.data.temporal_frames == 8 and config.model.text_frozen is True


def test_seed_propagates_to_data_and_train():
    config = load_run_config("tiny.yaml", seed=7)
    assert config.seed == 7 and config.data.seed == 7 and config.train.seed == 7
    assert load_run_config("tiny.yaml", overrides=["seed=9"]).train.seed == 9


def test_nested_seeds_cannot_diverge_from_the_top_level_seed():
    error = _expect_config_error(load_run_config, "tiny.yaml", overrides=["train.seed=4"])
    assert "train.seed" in str(error)
    _expect_config_error(load_run_config, "tiny.yaml", overrides=["data.seed=4"])
    _expect_config_error(RunConfig.from_dict, {"seed": 1, "data": {"seed": 2}})
    assert RunConfig.from_dict({"seed": 3, "train": {"seed": 3}}).data.seed == 3
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "run.json"
        path.write_text(json.dumps(load_run_config("tiny.yaml").to_dict()), encoding="utf-8")
        reseeded = load_run_config(str(path), overrides=["seed=6"])
    assert reseeded.data.seed == 6 and reseeded.train.seed == 6


def test_overrides_reach_nested_keys():
    config = load_run_config("tiny.yaml", overrides=[
        "train.epochs=5", "train.loss.tau=0.1", "eval.class_subset=[2, 3]",
        "train.components.red_min=false", "train.learning_rate=1e-4",
    ])
    assert config.train.epochs == 5
    assert config.train.loss.tau == 0.1
    assert config.eval.class_subset == [2, 3]
    assert config.train.components["red_min"] is False
    assert config.train.learning_rate == 1e-4


def test_unknown_keys_are_rejected():
    error = _expect_config_error(load_run_config, "tiny.yaml", overrides=["train.epoch=5"])
    assert "train.epoch" in str(error)
    _expect_config_error(RunConfig.from_dict, {"optimizer": {"name": "sgd"}})
    _expect_config_error(RunConfig.from_dict, {"train": {"loss": {"temperature": 0.1}}})


def test_wrong_types_and_values_are_rejected():
    _expect_config_error(load_run_config, "tiny.yaml", overrides=["train.epochs=many"])
    _expect_config_error(load_run_config, "tiny.yaml", overrides=["train.batch_size=1"])
    _expect_config_error(load_run_config, "tiny.yaml", overrides=["train.loss.tau=0"])
    _expect_config_error(load_run_config, "tiny.yaml", overrides=["model.fusion_mode=gated"])
    _expect_config_error(load_run_config, "tiny.yaml", overrides=["eval.class_subset=[0, 9]"])
    _expect_config_error(load_run_config, "tiny.yaml", overrides=["data=3"])


def test_prompt_mode_must_match_class_count():
    _expect_config_error(load_run_config, "tiny.yaml", overrides=["prompts.mode=micro-five"])
    config = load_run_config("tiny.yaml", overrides=["prompts.mode=micro-five", "data.n_classes=5"])
    assert config.prompts.mode == "micro-five"


def test_parse_override():
    assert parse_override("train.epochs=12") == ("train.epochs", 12)
    assert parse_override("model.text_frozen=false") == ("model.text_frozen", False)
    assert parse_override("prompts.mode=basic-six") == ("prompts.mode", "basic-six")
    _expect_config_error(parse_override, "train.epochs")
    _expect_config_error(parse_override, "=3")
    raw = {"train": {"epochs": 1}}
    assert apply_overrides(raw, ["train.loss.alpha=0.5"]) == {"train": {"epochs": 1, "loss": {"alpha": 0.5}}}
    assert raw == {"train": {"epochs": 1}}


def test_json_config_and_round_trip():
    config = load_run_config("tiny.yaml", overrides=["train.epochs=4"])
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "run.json"
        path.write_text(json.dumps(config.to_dict()), encoding="utf-8")
        again = load_run_config(str(path))
    assert again == config


def test_config_key_docs_lists_every_leaf():
    keys = [key for key, _ in config_key_docs()]
    for expected in ("seed", "data.n_subjects", "train.loss.tau", "train.augment.dropout",
                     "train.components", "eval.class_subset", "domain_shift.view_seed"):
        assert expected in keys


if __name__ == "__main__":
    sys.exit(run_tests(globals()))
