"""Tests for run configuration parsing, environment handling and seeds."""

import json

import pytest

from promptpert.cli.config import load_run_config, parse_run_config, set_dotted
from promptpert.utils.config import (
    DETERMINISTIC_ENV,
    derive_seed,
    deterministic_requested,
    write_json_atomic,
)
from promptpert.utils.exceptions import ConfigError


@pytest.mark.unit
class TestRunConfig:
    def test_defaults_without_file(self):
        config = load_run_config(None)
        assert config.train is None
        assert config.eval.defenses[0].kind == "none"
        assert config.data.eval_spec().split == "eval"

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_run_config({"generator": {"widht": 3}})
        assert any(e.startswith("generator.widht") for e in excinfo.value.errors)

    def test_train_epochs_required(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_run_config({"train": {"learning_rate": 1e-3}})
        assert "train.epochs: Field required" in excinfo.value.errors

    def test_overrides_win(self):
        config = parse_run_config(
            {"train": {"epochs": 3}, "seed": 1},
            {"train.epochs": 9, "seed": 4, "train.max_steps": None},
        )
        assert config.train.epochs == 9
        assert config.seed == 4
        assert config.train.max_steps is None

    def test_root_seed_propagates(self):
        config = parse_run_config({"train": {"epochs": 1}, "seed": 11})
        assert config.train.seed == 11
        assert config.finetune.seed == 11

    def test_section_seed_is_kept(self):
        config = parse_run_config({"train": {"epochs": 1, "seed": 3}, "seed": 11})
        assert config.train.seed == 3

    def test_attention_tokens_applied(self):
        config = parse_run_config({"conditioning": {"attention_tokens": 4}})
        assert config.generator.attention_tokens == 4

    def test_generator_takes_training_budget(self):
        config = parse_run_config({"train": {"epochs": 1, "epsilon": 0.03}})
        assert config.generator_config().epsilon == pytest.approx(0.03)
        assert "surrogate" not in config.train_config().model_dump()

    def test_eval_jobs_must_be_positive(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_run_config({"eval": {"n_jobs": 0}})
        assert any(e.startswith("eval.n_jobs") for e in excinfo.value.errors)

    def test_require_train(self):
        with pytest.raises(ConfigError):
            parse_run_config({}).require_train()

    def test_bad_json_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")

    def test_set_dotted_creates_sections(self):
        document = {}
        set_dotted(document, "a.b.c", 1)
        assert document == {"a": {"b": {"c": 1}}}


@pytest.mark.unit
class TestEnvironment:
    def test_derive_seed_is_stable_and_purpose_specific(self):
        assert derive_seed(7, "init") == derive_seed(7, "init")
        assert derive_seed(7, "init") != derive_seed(7, "data")
        assert derive_seed(7, "init") != derive_seed(8, "init")

    @pytest.mark.parametrize("value,expected", [("1", True), ("0", False), ("", False)])
    def test_deterministic_flag(self, monkeypatch, value, expected):
        monkeypatch.setenv(DETERMINISTIC_ENV, value)
        assert deterministic_requested() is expected

    def test_atomic_json_write(self, tmp_path):
        path = write_json_atomic(tmp_path / "nested" / "out.json", {"b": 1, "a": 2})
        assert json.loads(path.read_text()) == {"a": 2, "b": 1}
        assert list(path.parent.iterdir()) == [path]
