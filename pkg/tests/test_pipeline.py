import numpy as np
import pytest

from stepembed.config.settings import build_model_config
from stepembed.data.synthetic import true_scheme
from stepembed.embedding.grouping import single_group_scheme
from stepembed.engine.diffcore import GraphTape, Tensor, finite_diff_check, parameter
from stepembed.engine.errors import ShapeError
from stepembed.models.schemas import ModelSection
from stepembed.pipeline import (
    embed_steps, embedding_params, init_model_params, model_forward, parameter_count, per_stay_steps,
)
from stepembed.training.trainer import task_loss

SMALL = {"token_dim": 4, "encoder_heads": 2, "embedding_dim": 4, "agg_depth": 1, "agg_heads": 2,
         "backbone_hidden": 3, "encoder_hidden": 3}


def _config(task="online_binary", grouping=None, d=6, T=4, n_classes=1, **kw):
    section = ModelSection(**{**SMALL, **kw})
    return build_model_config(section, d, task, T, grouping, n_classes)


def _forward(config, params, X, lengths=None):
    tape = GraphTape(mode="eval")
    return model_forward(tape, config, params, tape.leaf("X", Tensor(X)), lengths).predictions.data


@pytest.mark.parametrize("task, n_classes, shape", [
    ("online_binary", 1, (2, 4)),
    ("regression", 1, (2, 4)),
    ("per_stay_binary", 1, (2,)),
    ("multiclass", 3, (2, 3)),
])
def test_prediction_shapes(task, n_classes, shape, rng):
    config = _config(task, true_scheme(2, 3), n_classes=n_classes)
    out = _forward(config, init_model_params(config, seed=0), rng.normal(size=(2, 4, 6)), [4, 2])
    assert out.shape == shape


def test_init_is_seeded():
    config = _config(grouping=true_scheme(2, 3))
    a, b, c = (init_model_params(config, seed=s) for s in (5, 5, 6))
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a)


def test_embedding_params_cover_encoders_and_aggregator():
    params = init_model_params(_config(grouping=true_scheme(2, 3)), seed=0)
    names = set(embedding_params(params))
    assert any(n.startswith("embedding.g1.") for n in names)
    assert any(n.startswith("embedding.agg.") for n in names)
    assert not any(n.startswith(("backbone.", "head.")) for n in names)
    assert set(parameter_count(params)) == {"embedding", "backbone", "head"}


def test_per_stay_steps():
    np.testing.assert_array_equal(per_stay_steps([3, 5], None), [2, 4])
    np.testing.assert_array_equal(per_stay_steps([3, 5], 3), [2, 3])


def test_per_stay_reads_last_valid_step(rng):
    config = _config("per_stay_binary", true_scheme(2, 3))
    params = init_model_params(config, seed=1)
    X = rng.normal(size=(1, 4, 6))
    short = _forward(config, params, X[:, :2], [2])
    padded = _forward(config, params, X, [2])
    assert short[0] == pytest.approx(padded[0], abs=1e-12)


def test_single_covering_group_matches_direct(rng):
    direct = _config(encoder="mlp")
    grouped = _config(encoder="mlp", grouping=single_group_scheme(6), aggregation="mean")
    p_direct = init_model_params(direct, seed=2)
    p_grouped = {}
    for name, tensor in p_direct.items():
        key = name.replace("embedding.encoder.", "embedding.g0.")
        p_grouped[key] = tensor
    p_grouped["embedding.agg.out.w"] = parameter(np.eye(4))
    p_grouped["embedding.agg.out.b"] = parameter(np.zeros(4))
    assert set(p_grouped) == set(init_model_params(grouped, seed=2))
    X = rng.normal(size=(2, 4, 6))
    np.testing.assert_allclose(_forward(grouped, p_grouped, X), _forward(direct, p_direct, X), atol=1e-12)


def test_embed_steps_rejects_wrong_width(rng):
    config = _config()
    with pytest.raises(ShapeError):
        embed_steps(GraphTape(mode="eval"), config, init_model_params(config), Tensor(np.zeros((3, 5))))


@pytest.mark.parametrize("backbone", ["gru", "transformer", "tcn"])
def test_prefix_causality_end_to_end(backbone, rng):
    config = _config(grouping=true_scheme(2, 3), backbone=backbone, backbone_heads=1)
    params = init_model_params(config, seed=0)
    X = rng.normal(size=(1, 4, 6))
    changed = X.copy()
    changed[0, 3] += 3.0
    a, b = _forward(config, params, X), _forward(config, params, changed)
    assert a[0, :3].tobytes() == b[0, :3].tobytes()


@pytest.mark.parametrize("encoder, aggregation", [("ftt", "attention"), ("resnet", "concat"), ("mlp", "sum")])
def test_full_pipeline_gradient(encoder, aggregation, rng):
    config = _config(grouping=true_scheme(2, 3), encoder=encoder, aggregation=aggregation, encoder_depth=1)
    params = init_model_params(config, seed=3)
    X = rng.normal(size=(2, 4, 6))
    y = (rng.random((2, 4)) < 0.5).astype(float)
    mask = np.array([[True] * 4, [True, True, False, False]])

    def build(tape, p):
        preds = model_forward(tape, config, p, tape.constant(X), [4, 2]).predictions
        return task_loss(tape, "online_binary", preds, y, mask).value

    assert finite_diff_check(build, {k: v.data for k, v in params.items()}) <= 1e-5


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("backbone", ["gru", "transformer", "tcn"])
def test_ftt_attention_gradient_every_backbone(backbone, seed):
    config = _config(grouping=true_scheme(2, 3), encoder="ftt", aggregation="attention",
                     encoder_depth=1, backbone=backbone, backbone_heads=1)
    params = init_model_params(config, seed=seed)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(1, 4, 6))
    y = (rng.random((1, 4)) < 0.5).astype(float)
    mask = np.ones((1, 4), dtype=bool)

    def build(tape, p):
        preds = model_forward(tape, config, p, tape.constant(X), [4]).predictions
        return task_loss(tape, "online_binary", preds, y, mask).value

    assert finite_diff_check(build, {k: v.data for k, v in params.items()}) <= 1e-5
