import math

import numpy as np
import pytest

from stepembed.engine.diffcore import GraphTape, Tensor, backward_grads, finite_diff_check, forward_eval
from stepembed.engine.errors import NumericError, ShapeError, TapeError


def _run(build, **inputs):
    tape = GraphTape(mode="eval")
    leaves = {k: tape.leaf(k, Tensor(v, requires_grad=True)) for k, v in inputs.items()}
    return tape, leaves, build(tape, leaves)


# === forward ===

def test_matmul_identity():
    _, _, out = _run(lambda t, p: t.matmul(p["a"], p["b"]), a=[[1, 2], [3, 4]], b=[[1, 0], [0, 1]])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_uniform():
    _, _, out = _run(lambda t, p: t.softmax(p["x"]), x=[0.0, 0.0, 0.0])
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_layer_norm_without_eps():
    _, _, out = _run(lambda t, p: t.layer_norm(p["x"], eps=0.0), x=[1.0, 2.0, 3.0])
    s = math.sqrt(1.5)
    np.testing.assert_allclose(out.data, [-s, 0.0, s], atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    x = rng.normal(scale=5.0, size=(6, 9))
    _, _, out = _run(lambda t, p: t.softmax(p["x"], axis=-1), x=x)
    assert (out.data >= 0).all()
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_masked_softmax_zeroes_hidden_positions():
    mask = np.tril(np.ones((3, 3), dtype=bool))
    _, _, out = _run(lambda t, p: t.softmax(p["x"], mask=mask), x=np.zeros((3, 3)))
    np.testing.assert_allclose(out.data[0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(out.data[2], [1 / 3, 1 / 3, 1 / 3])


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        _run(lambda t, p: t.matmul(p["a"], p["b"]), a=np.ones((2, 3)), b=np.ones((2, 3)))


def test_nan_input_rejected():
    tape = GraphTape()
    with pytest.raises(NumericError):
        tape.leaf("x", Tensor([1.0, float("nan")]))


def test_forward_eval_replays_with_new_inputs():
    tape, leaves, out = _run(lambda t, p: t.reduce_sum(t.multiply(p["x"], p["x"])), x=[1.0, 2.0])
    tape.output("loss", out)
    result = forward_eval(tape, {"x": np.array([3.0, 4.0])})
    assert result["loss"].item() == 25.0


def test_forward_eval_rejects_wrong_shape():
    tape, _, out = _run(lambda t, p: t.reduce_sum(p["x"]), x=[1.0, 2.0])
    tape.output("loss", out)
    with pytest.raises(ShapeError):
        forward_eval(tape, {"x": np.ones(3)})


def test_dropout_is_identity_in_eval(rng):
    x = rng.normal(size=(4, 5))
    _, _, out = _run(lambda t, p: t.dropout(p["x"], 0.5), x=x)
    np.testing.assert_array_equal(out.data, x)


def test_dropout_is_reproducible_per_seed(rng):
    x = rng.normal(size=(4, 5))
    outs = []
    for _ in range(2):
        tape = GraphTape(mode="train", seed=42)
        outs.append(tape.dropout(tape.leaf("x", Tensor(x)), 0.5).data)
    np.testing.assert_array_equal(outs[0], outs[1])
    assert not np.array_equal(outs[0], x)


def test_eval_forward_is_bit_identical(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))

    def build(t, p):
        return t.gelu(t.matmul(p["x"], p["w"]))

    a = _run(build, x=x, w=w)[2].data
    b = _run(build, x=x, w=w)[2].data
    assert a.tobytes() == b.tobytes()


# === backward ===

def test_grad_of_sum():
    tape, leaves, loss = _run(lambda t, p: t.reduce_sum(p["x"]), x=[1.0, 2.0, 3.0])
    grads = backward_grads(tape, loss)
    np.testing.assert_array_equal(grads["x"], [1.0, 1.0, 1.0])


def test_grad_of_square():
    tape, _, loss = _run(lambda t, p: t.reduce_sum(t.multiply(p["x"], p["x"])), x=[1.0, -2.0])
    np.testing.assert_array_equal(backward_grads(tape, loss)["x"], [2.0, -4.0])


def test_unused_parameter_gets_exact_zero():
    tape, leaves, loss = _run(lambda t, p: t.reduce_sum(p["x"]), x=[1.0, 2.0], unused=[5.0, 6.0])
    grads = backward_grads(tape, loss)
    assert np.array_equal(grads["unused"], np.zeros(2))


def test_non_scalar_loss_rejected():
    tape, _, out = _run(lambda t, p: t.relu(p["x"]), x=[1.0, 2.0])
    with pytest.raises(TapeError):
        backward_grads(tape, out)


def test_backward_before_forward_rejected():
    tape = GraphTape()
    with pytest.raises(TapeError):
        backward_grads(tape, Tensor(1.0, requires_grad=True))


def test_bce_of_sigmoid_matches_finite_differences(rng):
    x = rng.normal(size=(5,))

    def build(t, p):
        z = t.reduce_sum(t.multiply(p["w"], t.constant(x)))
        y = 1.0
        return t.sub(t.softplus(z), t.scale(z, y))

    assert finite_diff_check(build, {"w": rng.normal(size=(5,))}) <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_linear_layer_gradient(seed):
    r = np.random.default_rng(seed)

    def build(t, p):
        return t.reduce_sum(t.tanh(t.affine(p["x"], p["w"], p["b"])))

    point = {"x": r.normal(size=(3, 4)), "w": r.normal(size=(4, 2)), "b": r.normal(size=(2,))}
    assert finite_diff_check(build, point) <= 1e-6


def test_constant_function_has_zero_error():
    assert finite_diff_check(lambda t, p: t.constant(3.0), {"x": np.ones(2)}) == 0.0


UNARY_OPS = {
    "relu": lambda t, x: t.relu(x),
    "gelu": lambda t, x: t.gelu(x),
    "sigmoid": lambda t, x: t.sigmoid(x),
    "tanh": lambda t, x: t.tanh(x),
    "softplus": lambda t, x: t.softplus(x),
    "softmax": lambda t, x: t.softmax(x, axis=-1),
    "log-softmax": lambda t, x: t.log_softmax(x, axis=-1),
    "layer-norm": lambda t, x: t.layer_norm(x, axis=-1),
    "scalar-scale": lambda t, x: t.scale(x, -2.5),
    "transpose": lambda t, x: t.transpose(x, (1, 0)),
    "reshape": lambda t, x: t.reshape(x, (12,)),
    "slice": lambda t, x: t.slice(x, (slice(None), [2, 0])),
    "reduce-mean": lambda t, x: t.reduce_mean(x, axis=0),
    "reduce-sum": lambda t, x: t.reduce_sum(x, axis=1, keepdims=True),
    "embedding-select": lambda t, x: t.embedding_select(x, [1, 1, 2]),
    "concat": lambda t, x: t.concat([x, t.scale(x, 2.0)], axis=1),
}


@pytest.mark.parametrize("kind", sorted(UNARY_OPS))
def test_every_op_matches_finite_differences(kind):
    op = UNARY_OPS[kind]
    weights = np.random.default_rng(99).normal(size=200)
    for seed in range(20):
        x = np.random.default_rng(seed).normal(size=(3, 4))
        if kind == "relu":
            # lontano dal punto di non derivabilità
            x = np.where(np.abs(x) < 1e-2, 0.5, x)

        def build(t, p):
            y = op(t, p["x"])
            w = t.constant(weights[:y.size].reshape(y.shape))
            return t.reduce_sum(t.multiply(y, w))

        assert finite_diff_check(build, {"x": x}) <= 1e-6, kind


@pytest.mark.parametrize("kind", ["matmul", "add", "multiply"])
def test_binary_ops_match_finite_differences(kind):
    for seed in range(20):
        r = np.random.default_rng(seed)
        a = r.normal(size=(2, 3, 4))
        b = r.normal(size=(4, 2)) if kind == "matmul" else r.normal(size=(4,))

        def build(t, p):
            y = getattr(t, kind)(p["a"], p["b"])
            return t.reduce_sum(t.tanh(y))

        assert finite_diff_check(build, {"a": a, "b": b}) <= 1e-6, kind


def test_dropout_gradient_in_train_mode():
    x = np.random.default_rng(0).normal(size=(4, 4))

    def build(t, p):
        return t.reduce_sum(t.tanh(t.dropout(p["x"], 0.3)))

    assert finite_diff_check(build, {"x": x}, mode="train", seed=5) <= 1e-6
