import math

import numpy as np
import pytest

from stepembed.embedding.encoders import init_encoder_params
from stepembed.embedding.grouping import (
    aggregate, concept_embed, init_aggregator_params, init_group_params, scheme_from_assignments,
    single_group_scheme, validate_partition,
)
from stepembed.engine.diffcore import GraphTape, Tensor, backward_grads, parameter
from stepembed.engine.errors import PartitionError, ShapeError
from stepembed.engine.layers import prefixed, sub_params
from stepembed.models.schemas import AggregatorSpec, EncoderSpec, FeatureGroup, GroupingScheme


def _scheme(*groups):
    return GroupingScheme(name="test", groups=[FeatureGroup(name=f"G{i}", indices=list(g))
                                               for i, g in enumerate(groups)])


def _agg(method, K=2, dim=4, out=3, **kw):
    return AggregatorSpec(method=method, group_dim=dim, n_groups=K, output_dim=out, **kw)


# === validate_partition ===

def test_valid_partition():
    assert validate_partition(_scheme([0, 1], [2]), 3) is True


def test_overlap_reports_index():
    with pytest.raises(PartitionError) as err:
        validate_partition(_scheme([0, 1], [1, 2]), 3)
    assert err.value.duplicated == [1]


def test_uncovered_reports_index():
    with pytest.raises(PartitionError) as err:
        validate_partition(_scheme([0], [2]), 3)
    assert err.value.missing == [1]


def test_empty_group_rejected():
    with pytest.raises(PartitionError) as err:
        validate_partition(_scheme([0, 1, 2], []), 3)
    assert err.value.empty == ["G1"]


def test_out_of_range_index_rejected():
    with pytest.raises(PartitionError):
        validate_partition(_scheme([0, 1, 3]), 3)


def test_scheme_from_assignments_keeps_column_order():
    scheme = scheme_from_assignments("organ", ["a", "b", "c", "d"], {"c": "lung", "a": "heart", "b": "lung", "d": "heart"})
    assert scheme.group_names == ["heart", "lung"]
    assert [g.indices for g in scheme.groups] == [[0, 3], [1, 2]]


def test_scheme_from_assignments_unknown_feature():
    with pytest.raises(PartitionError):
        scheme_from_assignments("x", ["a"], {"a": "g", "zz": "g"})


def test_scheme_from_assignments_missing_feature():
    with pytest.raises(PartitionError) as err:
        scheme_from_assignments("x", ["a", "b"], {"a": "g"})
    assert err.value.missing == [1]


# === concept_embed ===

def _identity_linear(n):
    return {"out.w": parameter(np.eye(n)), "out.b": parameter(np.zeros(n))}


def test_single_covering_group_identity_encoder(rng):
    scheme = single_group_scheme(3)
    spec = EncoderSpec(kind="linear", input_dim=3, output_dim=3)
    params = prefixed(_identity_linear(3), "g0")
    x = rng.normal(size=(4, 3))
    out = concept_embed(GraphTape(mode="eval"), 0, Tensor(x), scheme, [spec], params)
    np.testing.assert_array_equal(out.h.data, x)


def test_slice_follows_declared_order():
    scheme = _scheme([2, 0], [1])
    specs = [EncoderSpec(kind="linear", input_dim=2, output_dim=2),
             EncoderSpec(kind="linear", input_dim=1, output_dim=1)]
    params = {**prefixed(_identity_linear(2), "g0"), **prefixed(_identity_linear(1), "g1")}
    x = np.array([[10.0, 20.0, 30.0]])
    out = concept_embed(GraphTape(mode="eval"), 0, Tensor(x), scheme, specs, params)
    np.testing.assert_array_equal(out.h.data, [[30.0, 10.0]])


def test_group_index_out_of_range(rng):
    scheme = _scheme([0], [1])
    specs = [EncoderSpec(kind="linear", input_dim=1, output_dim=2)] * 2
    params = init_group_params(specs, rng)
    with pytest.raises(ShapeError):
        concept_embed(GraphTape(mode="eval"), 2, Tensor(np.zeros((1, 2))), scheme, specs, params)


def test_out_of_group_perturbation_leaves_concept_unchanged(rng):
    scheme = _scheme([0, 1], [2, 3])
    specs = [EncoderSpec(kind="ftt", input_dim=2, output_dim=4, token_dim=4, heads=2)] * 2
    params = init_group_params(specs, rng)
    x = rng.normal(size=(3, 4))
    moved = x.copy()
    moved[:, 3] += 5.0
    h = [[concept_embed(GraphTape(mode="eval"), k, Tensor(v), scheme, specs, params).h.data
          for k in range(2)] for v in (x, moved)]
    assert h[0][0].tobytes() == h[1][0].tobytes()
    assert not np.allclose(h[0][1], h[1][1])


def test_group_gradient_only_through_own_parameters(rng):
    scheme = _scheme([0, 1], [2])
    specs = [EncoderSpec(kind="mlp", input_dim=2, output_dim=3, hidden_dim=3),
             EncoderSpec(kind="mlp", input_dim=1, output_dim=3, hidden_dim=3)]
    params = init_group_params(specs, rng)
    tape = GraphTape(mode="eval")
    out = concept_embed(tape, 0, Tensor(rng.normal(size=(2, 3))), scheme, specs, params)
    grads = backward_grads(tape, tape.reduce_sum(out.h), params)
    assert all(np.all(g == 0.0) for n, g in grads.items() if n.startswith("g1."))
    assert any(np.any(g != 0.0) for n, g in grads.items() if n.startswith("g0."))


# === aggregate ===

def _agg_run(spec, params, h_list):
    tape = GraphTape(mode="eval")
    return aggregate(tape, [Tensor(h) for h in h_list], spec, params)


def test_mean_of_identical_vectors(rng):
    spec = _agg("mean")
    params = init_aggregator_params(spec, rng)
    v = rng.normal(size=(1, 4))
    out = _agg_run(spec, params, [v, v]).h.data
    np.testing.assert_allclose(out, v @ params["out.w"].data + params["out.b"].data, atol=1e-14)


def test_sum_cancellation(rng):
    spec = _agg("sum")
    params = init_aggregator_params(spec, rng)
    v = rng.normal(size=(2, 4))
    out = _agg_run(spec, params, [v, -v]).h.data
    np.testing.assert_allclose(out, np.tile(params["out.b"].data, (2, 1)), atol=1e-14)


def test_attention_single_group_hand_computed(rng):
    spec = _agg("attention", K=1, dim=2, out=2, agg_depth=1, agg_heads=1)
    params = init_aggregator_params(spec, rng)
    h = rng.normal(size=(1, 2))
    out = _agg_run(spec, params, [h])
    weights = out.attention[0]
    assert weights.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    p = {k: v.data for k, v in params.items()}

    def ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def lin(x, name):
        return x @ p[f"{name}.w"] + p[f"{name}.b"]

    tokens = np.vstack([p["cls"], h[0]])
    a = ln(tokens, p["blocks.0.ln1.g"], p["blocks.0.ln1.b"])
    q, k, v = lin(a, "blocks.0.wq"), lin(a, "blocks.0.wk"), lin(a, "blocks.0.wv")
    scores = q @ k.T / math.sqrt(2)
    w = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    x1 = tokens + lin(w @ v, "blocks.0.wo")
    f = lin(ln(x1, p["blocks.0.ln2.g"], p["blocks.0.ln2.b"]), "blocks.0.ff1")
    f = 0.5 * f * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (f + 0.044715 * f ** 3)))
    x2 = x1 + lin(f, "blocks.0.ff2")
    expected = lin(ln(x2[0], p["ln_out.g"], p["ln_out.b"]), "out")
    np.testing.assert_allclose(weights[0, 0], w, atol=1e-12)
    np.testing.assert_allclose(out.h.data[0], expected, atol=1e-10)


def test_concat_is_order_sensitive(rng):
    spec = _agg("concat")
    params = init_aggregator_params(spec, rng)
    a, b = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    assert not np.allclose(_agg_run(spec, params, [a, b]).h.data, _agg_run(spec, params, [b, a]).h.data)


def test_concat_limit_rejected_at_config_time():
    with pytest.raises(ValueError):
        _agg("concat", K=3, dim=4, max_concat_dim=8)


@pytest.mark.parametrize("method", ["mean", "sum", "attention"])
def test_permutation_invariance(method, rng):
    scheme = _scheme([0, 1], [2, 3, 4], [5])
    specs = [EncoderSpec(kind="mlp", input_dim=len(g.indices), output_dim=4, hidden_dim=3) for g in scheme.groups]
    enc = init_group_params(specs, rng)
    agg_spec = _agg(method, K=3, agg_heads=2)
    agg_params = init_aggregator_params(agg_spec, rng)
    x = rng.normal(size=(5, 6))

    def run(order):
        sub_scheme = GroupingScheme(name="p", groups=[scheme.groups[k] for k in order])
        sub_specs = [specs[k] for k in order]
        params = {}
        for new, old in enumerate(order):
            params.update(prefixed(sub_params(enc, f"g{old}"), f"g{new}"))
        tape = GraphTape(mode="eval")
        h = [concept_embed(tape, k, Tensor(x), sub_scheme, sub_specs, params).h for k in range(3)]
        return aggregate(tape, h, agg_spec, agg_params).h.data

    np.testing.assert_allclose(run([0, 1, 2]), run([2, 0, 1]), atol=1e-9)


def test_attention_rows_sum_to_one(rng):
    spec = _agg("attention", K=4, agg_depth=2, agg_heads=2)
    out = _agg_run(spec, init_aggregator_params(spec, rng), [rng.normal(size=(3, 4)) for _ in range(4)])
    for weights in out.attention:
        assert weights.shape == (3, 2, 5, 5)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def test_aggregate_dimension_mismatch(rng):
    spec = _agg("mean")
    with pytest.raises(ShapeError):
        _agg_run(spec, init_aggregator_params(spec, rng), [np.zeros((1, 4)), np.zeros((1, 5))])


def test_group_params_are_disjoint(rng):
    specs = [EncoderSpec(kind="linear", input_dim=2, output_dim=3)] * 3
    params = init_group_params(specs, rng)
    assert sorted({n.split(".")[0] for n in params}) == ["g0", "g1", "g2"]
    assert not np.array_equal(params["g0.out.w"].data, params["g1.out.w"].data)
    assert init_encoder_params(specs[0], rng).keys() == sub_params(params, "g0").keys()
