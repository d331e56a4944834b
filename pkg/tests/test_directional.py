"""Riproduzioni direzionali sul benchmark sintetico (lente: pytest --runslow)."""

from functools import lru_cache

import numpy as np
import pytest

from stepembed.config.settings import build_model_config, build_train_config
from stepembed.data.synthetic import generate_synthetic, label_prevalence
from stepembed.explain.attention import aggregate_report
from stepembed.models.schemas import ModelSection, TrainSection
from stepembed.training.trainer import evaluate, train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
# L1 piccolo: la norma iniziale degli embedding è O(10^2), λ = 1e-3 domina la BCE
BUDGET = {"max_epochs": 60, "learning_rate": 1e-3, "patience": 20, "l1_weight": 1e-5}
SMALL_FTT = {"token_dim": 8, "encoder_heads": 2, "embedding_dim": 8, "backbone_hidden": 16}


def _dataset(seed, **kw):
    return generate_synthetic(seed=seed, n_stays=200, T=16, K=3, feats_per_group=4, **kw)


def _fit(dataset, grouping, seed, **model_kw):
    section = ModelSection(**{"encoder": "ftt", "aggregation": "attention", **SMALL_FTT, **model_kw})
    T = max(s.T for s in dataset.stays)
    model = build_model_config(section, dataset.n_features, dataset.task, T, grouping)
    cfg = build_train_config(TrainSection(seed=seed, **BUDGET), dataset.task)
    return model, train(model, cfg, dataset)


@lru_cache(maxsize=None)
def _val_auprc(variant, seed):
    dataset, scheme = _dataset(seed)
    if variant == "none":
        model, result = _fit(dataset, None, seed, encoder="none")
    elif variant == "direct":
        model, result = _fit(dataset, None, seed)
    else:
        model, result = _fit(dataset, dataset.schemes[variant], seed)
    return evaluate(model, result.params, result.dataset, "val")["auprc"]


def _median(variant):
    return float(np.median([_val_auprc(variant, s) for s in SEEDS]))


def test_grouped_model_beats_chance():
    dataset, _ = _dataset(0)
    assert _val_auprc("true", 0) > 1.5 * label_prevalence(dataset)


def test_grouped_ftt_beats_no_embedding():
    assert _median("true") >= _median("none") + 0.03


def test_grouped_ftt_not_worse_than_direct_ftt():
    assert _median("true") >= _median("direct")


def test_true_grouping_not_worse_than_interleaved():
    assert _median("true") >= _median("interleaved")


def test_attention_points_at_signal_group():
    dataset, scheme = _dataset(0, signal_groups=[1])
    model, result = _fit(dataset, scheme, seed=0)
    report = aggregate_report(model, result.params, result.dataset, "test")
    assert int(np.argmax(report.between)) == 1


def test_regression_beats_zero_predictor():
    dataset, scheme = generate_synthetic(seed=1, n_stays=200, T=16, K=2, feats_per_group=3,
                                         task="regression", min_T=4)
    model, result = _fit(dataset, scheme, seed=0, encoder="mlp", aggregation="mean")
    record = evaluate(model, result.params, result.dataset, "test")
    targets = np.concatenate([s.labels for s in dataset.split("test")])
    assert record["mae_hours"] < float(np.mean(np.abs(targets)))
