import logging

import pytest

from stepembed.config import settings
from stepembed.config.defaults import TRAIN_DEFAULTS
from stepembed.config.settings import (
    build_model_config, build_train_config, load_experiment, override, parse_experiment,
)
from stepembed.data.synthetic import true_scheme
from stepembed.engine.errors import ConfigError
from stepembed.models.schemas import ModelSection, TrainSection

MINIMAL = "[data]\ndir = data/x\n"


def test_minimal_file_uses_defaults():
    config = parse_experiment(MINIMAL)
    assert config.data.dir == "data/x"
    assert config.model.encoder == "ftt"
    assert config.model.aggregation == "attention"
    assert config.train.seed == 0
    assert config.output.dir == "runs/default"


def test_values_and_inline_comments():
    text = MINIMAL + "task = regression  # LoS\n[model]\nbackbone = tcn\nembedding_dim = 8\n[train]\nl1_weight = 0.1\n"
    config = parse_experiment(text)
    assert config.data.task == "regression"
    assert config.model.backbone == "tcn"
    assert config.model.embedding_dim == 8
    assert config.train.l1_weight == 0.1


@pytest.mark.parametrize("text", [
    "[model]\nencoder = ftt\n",
    MINIMAL + "[optimizer]\nlr = 1\n",
    MINIMAL + "[model]\ncolour = blue\n",
    MINIMAL + "[model]\nencoder = xgboost\n",
    MINIMAL + "[train]\nbatch_size = 0\n",
    "not an ini file",
])
def test_invalid_files(text):
    with pytest.raises(ConfigError):
        parse_experiment(text)


def test_error_names_section_and_key():
    with pytest.raises(ConfigError, match=r"\[model\] colour"):
        parse_experiment(MINIMAL + "[model]\ncolour = blue\n")


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "none.ini")


def test_load_from_disk(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(MINIMAL + "[output]\ndir = runs/x\n", encoding="utf-8")
    assert load_experiment(path).output.dir == "runs/x"


def test_override_is_validated():
    config = parse_experiment(MINIMAL)
    assert override(config, "train", seed=4).train.seed == 4
    assert config.train.seed == 0
    with pytest.raises(ConfigError):
        override(config, "train", seed=-1)


# === costruzione delle specifiche ===

def test_model_defaults_from_registry():
    model = build_model_config(ModelSection(), 8, "online_binary", 16, true_scheme(2, 4))
    assert model.encoder.token_dim == 64
    assert model.encoder.heads == 2
    assert model.aggregator.agg_depth == 2
    assert model.embedding_dim == 32
    assert model.backbone.hidden_dim == 64
    assert model.backbone.dropout == 0.4
    assert model.encoder.input_dim == 8
    assert [s.input_dim for s in model.group_specs()] == [4, 4]


def test_tcn_depth_follows_sequence_length():
    section = ModelSection(backbone="tcn")
    assert build_model_config(section, 4, "online_binary", 32, None).backbone.depth == 5
    assert build_model_config(section, 4, "online_binary", 2, None).backbone.depth == 1


def test_tcn_depth_choice_is_logged(caplog):
    with caplog.at_level(logging.INFO, logger="stepembed.settings"):
        build_model_config(ModelSection(backbone="tcn"), 4, "online_binary", 32, None)
    assert any("campo recettivo 32" in r.getMessage() for r in caplog.records)


def test_task_routing_sets_head():
    model = build_model_config(ModelSection(), 4, "multiclass", 8, None, n_classes=5)
    assert model.backbone.head_kind == "multiclass"
    assert model.backbone.prediction_mode == "per_stay"
    assert model.backbone.output_dim == 5


def test_invalid_combination_becomes_config_error():
    with pytest.raises(ConfigError):
        build_model_config(ModelSection(encoder="none"), 4, "online_binary", 8, true_scheme(2, 2))
    with pytest.raises(ConfigError):
        build_model_config(ModelSection(token_dim=6, encoder_heads=4), 4, "online_binary", 8, None)


def test_train_defaults_and_clip_disable():
    cfg = build_train_config(TrainSection(seed=3), "regression")
    assert cfg.learning_rate == TRAIN_DEFAULTS["learning_rate"]
    assert cfg.patience == 10
    assert cfg.seed == 3
    assert cfg.task_kind == "regression"
    assert build_train_config(TrainSection(grad_clip=0), "regression").grad_clip is None
