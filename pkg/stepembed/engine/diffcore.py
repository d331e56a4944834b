# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Diffcore
Motore tensoriale denso (float64) con differenziazione automatica reverse-mode.

- Tensor: array numpy float64 + flag requires_grad + buffer grad
- GraphTape: registro ordinato delle operazioni eseguite (modalità train | eval)
- Ogni primitiva ha una regola di forma e un prodotto vettore-Jacobiano analitico
- forward_eval rigioca il nastro su nuovi input (usato dal controllo alle differenze finite)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from stepembed.engine.errors import NumericError, ShapeError, TapeError

logger = logging.getLogger("stepembed.diffcore")

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
LAYER_NORM_EPS = 1e-5


# ============================================================
# TENSOR
# ============================================================

class Tensor:
    """Array denso float64 che partecipa al grafo computazionale."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape_id")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise TapeError(f"item() su tensore non scalare di forma {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def parameter(data: Any, name: Optional[str] = None) -> Tensor:
    """Tensore foglia addestrabile."""
    return Tensor(data, requires_grad=True, name=name)


# ============================================================
# PRIMITIVE OPS — regole di forma + VJP
# ============================================================

@dataclass(frozen=True)
class PrimitiveOp:
    """Tipo di operazione + attributi specifici."""
    kind: str
    attrs: Dict[str, Any] = field(default_factory=dict, hash=False, compare=False)


@dataclass
class Node:
    """Operazione eseguita: input, output e stato salvato per il backward."""
    op: PrimitiveOp
    inputs: Tuple[Tensor, ...]
    output: Tensor
    ctx: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., List[Optional[np.ndarray]]]


OPS: Dict[str, OpDef] = {}


def register_op(kind: str, forward: Callable, vjp: Callable) -> None:
    OPS[kind] = OpDef(forward=forward, vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Somma il gradiente sugli assi broadcastati fino a riottenere `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, *shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise ShapeError(f"{kind}: forme non broadcastabili {list(shapes)}") from None


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# --- matmul ---

def _matmul_fwd(xs, attrs, ctx):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: forme incompatibili {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    return np.matmul(a, b)


def _matmul_vjp(g, xs, out, attrs, ctx):
    a, b = xs
    ga = _unbroadcast(np.matmul(g, _swap_last(b)), a.shape)
    gb = _unbroadcast(np.matmul(_swap_last(a), g), b.shape)
    return [ga, gb]


# --- elementwise binarie ---

def _add_fwd(xs, attrs, ctx):
    a, b = xs
    _broadcast_shape("add", a.shape, b.shape)
    return a + b


def _add_vjp(g, xs, out, attrs, ctx):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


def _mul_fwd(xs, attrs, ctx):
    a, b = xs
    _broadcast_shape("multiply", a.shape, b.shape)
    return a * b


def _mul_vjp(g, xs, out, attrs, ctx):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _scale_fwd(xs, attrs, ctx):
    return xs[0] * attrs["factor"]


def _scale_vjp(g, xs, out, attrs, ctx):
    return [g * attrs["factor"]]


# --- attivazioni ---

def _relu_fwd(xs, attrs, ctx):
    return np.maximum(xs[0], 0.0)


def _relu_vjp(g, xs, out, attrs, ctx):
    return [g * (xs[0] > 0.0)]


def _gelu_fwd(xs, attrs, ctx):
    x = xs[0]
    t = np.tanh(GELU_C * (x + GELU_K * x ** 3))
    ctx["t"] = t
    return 0.5 * x * (1.0 + t)


def _gelu_vjp(g, xs, out, attrs, ctx):
    x = xs[0]
    t = ctx["t"]
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return [g * (0.5 * (1.0 + t) + 0.5 * x * dt)]


def _sigmoid_fwd(xs, attrs, ctx):
    return 0.5 * (1.0 + np.tanh(0.5 * xs[0]))


def _sigmoid_vjp(g, xs, out, attrs, ctx):
    return [g * out * (1.0 - out)]


def _tanh_fwd(xs, attrs, ctx):
    return np.tanh(xs[0])


def _tanh_vjp(g, xs, out, attrs, ctx):
    return [g * (1.0 - out * out)]


def _abs_fwd(xs, attrs, ctx):
    return np.abs(xs[0])


def _abs_vjp(g, xs, out, attrs, ctx):
    # sottogradiente 0 in x == 0
    return [g * np.sign(xs[0])]


def _softplus_fwd(xs, attrs, ctx):
    return np.logaddexp(0.0, xs[0])


def _softplus_vjp(g, xs, out, attrs, ctx):
    return [g * 0.5 * (1.0 + np.tanh(0.5 * xs[0]))]


# --- normalizzazioni ---

def _softmax_fwd(xs, attrs, ctx):
    x = xs[0]
    axis = attrs.get("axis", -1)
    mask = attrs.get("mask")
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        keep = np.broadcast_to(mask, x.shape)
        if not keep.any(axis=axis).all():
            raise ShapeError("softmax: riga completamente mascherata")
        z = np.where(keep, x, -np.inf)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, z, 0.0)), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(g, xs, out, attrs, ctx):
    axis = attrs.get("axis", -1)
    return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


def _log_softmax_fwd(xs, attrs, ctx):
    x = xs[0]
    axis = attrs.get("axis", -1)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _log_softmax_vjp(g, xs, out, attrs, ctx):
    axis = attrs.get("axis", -1)
    return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


def _layer_norm_fwd(xs, attrs, ctx):
    x = xs[0]
    axis = attrs.get("axis", -1)
    eps = attrs.get("eps", LAYER_NORM_EPS)
    mu = x.mean(axis=axis, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv_std
    ctx["inv_std"] = inv_std
    ctx["y"] = y
    return y


def _layer_norm_vjp(g, xs, out, attrs, ctx):
    axis = attrs.get("axis", -1)
    y = ctx["y"]
    gm = g.mean(axis=axis, keepdims=True)
    gy = (g * y).mean(axis=axis, keepdims=True)
    return [ctx["inv_std"] * (g - gm - y * gy)]


def _dropout_fwd(xs, attrs, ctx):
    mask = attrs.get("mask")
    if mask is None:
        return xs[0].copy()
    return xs[0] * mask


def _dropout_vjp(g, xs, out, attrs, ctx):
    mask = attrs.get("mask")
    return [g if mask is None else g * mask]


# --- strutturali ---

def _concat_fwd(xs, attrs, ctx):
    axis = attrs["axis"]
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat(axis={axis}): forme incompatibili {[x.shape for x in xs]}") from None


def _concat_vjp(g, xs, out, attrs, ctx):
    axis = attrs["axis"]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return list(np.split(g, bounds, axis=axis))


def _slice_fwd(xs, attrs, ctx):
    try:
        return np.array(xs[0][attrs["key"]])
    except IndexError as e:
        raise ShapeError(f"slice: indice fuori range su forma {xs[0].shape}: {e}") from None


def _slice_vjp(g, xs, out, attrs, ctx):
    gx = np.zeros_like(xs[0])
    np.add.at(gx, attrs["key"], g)
    return [gx]


def _reduce_fwd(xs, attrs, ctx, reducer):
    return np.asarray(reducer(xs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)))


def _reduce_vjp(g, x, attrs, scale):
    axis = attrs.get("axis")
    if not attrs.get("keepdims", False):
        if axis is None:
            g = np.reshape(g, (1,) * x.ndim)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(a % x.ndim for a in axes):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g * scale, x.shape).copy()


def _reduce_sum_fwd(xs, attrs, ctx):
    return _reduce_fwd(xs, attrs, ctx, np.sum)


def _reduce_sum_vjp(g, xs, out, attrs, ctx):
    return [_reduce_vjp(g, xs[0], attrs, 1.0)]


def _reduce_mean_fwd(xs, attrs, ctx):
    return _reduce_fwd(xs, attrs, ctx, np.mean)


def _reduce_mean_vjp(g, xs, out, attrs, ctx):
    x = xs[0]
    n = x.size / max(out.size, 1)
    return [_reduce_vjp(g, x, attrs, 1.0 / n)]


def _embedding_select_fwd(xs, attrs, ctx):
    table = xs[0]
    idx = attrs["indices"]
    if table.ndim != 2:
        raise ShapeError(f"embedding-select: tabella 2-D attesa, forma {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding-select: indici fuori da [0, {table.shape[0]})")
    return table[idx]


def _embedding_select_vjp(g, xs, out, attrs, ctx):
    gt = np.zeros_like(xs[0])
    np.add.at(gt, attrs["indices"], g)
    return [gt]


def _transpose_fwd(xs, attrs, ctx):
    axes = attrs.get("axes")
    if axes is not None and sorted(axes) != list(range(xs[0].ndim)):
        raise ShapeError(f"transpose: permutazione {axes} non valida per forma {xs[0].shape}")
    return np.transpose(xs[0], axes).copy()


def _transpose_vjp(g, xs, out, attrs, ctx):
    axes = attrs.get("axes")
    if axes is None:
        return [np.transpose(g)]
    return [np.transpose(g, np.argsort(axes))]


def _reshape_fwd(xs, attrs, ctx):
    try:
        return xs[0].reshape(attrs["shape"])
    except ValueError:
        raise ShapeError(f"reshape: {xs[0].shape} -> {attrs['shape']} non compatibile") from None


def _reshape_vjp(g, xs, out, attrs, ctx):
    return [g.reshape(xs[0].shape)]


register_op("matmul", _matmul_fwd, _matmul_vjp)
register_op("add", _add_fwd, _add_vjp)
register_op("multiply", _mul_fwd, _mul_vjp)
register_op("scalar-scale", _scale_fwd, _scale_vjp)
register_op("relu", _relu_fwd, _relu_vjp)
register_op("gelu", _gelu_fwd, _gelu_vjp)
register_op("sigmoid", _sigmoid_fwd, _sigmoid_vjp)
register_op("tanh", _tanh_fwd, _tanh_vjp)
register_op("abs", _abs_fwd, _abs_vjp)
register_op("softplus", _softplus_fwd, _softplus_vjp)
register_op("softmax", _softmax_fwd, _softmax_vjp)
register_op("log-softmax", _log_softmax_fwd, _log_softmax_vjp)
register_op("layer-norm", _layer_norm_fwd, _layer_norm_vjp)
register_op("dropout", _dropout_fwd, _dropout_vjp)
register_op("concat", _concat_fwd, _concat_vjp)
register_op("slice", _slice_fwd, _slice_vjp)
register_op("reduce-sum", _reduce_sum_fwd, _reduce_sum_vjp)
register_op("reduce-mean", _reduce_mean_fwd, _reduce_mean_vjp)
register_op("embedding-select", _embedding_select_fwd, _embedding_select_vjp)
register_op("transpose", _transpose_fwd, _transpose_vjp)
register_op("reshape", _reshape_fwd, _reshape_vjp)


# ============================================================
# GRAPH TAPE
# ============================================================

class GraphTape:
    """
    Nastro delle operazioni eseguite.
    Un nastro è single-thread; nastri distinti possono condividere parametri in sola lettura.
    Il dropout usa un RNG counter-based (Philox) con chiave = seed e contatore = indice chiamata.
    """

    def __init__(self, mode: str = "train", seed: int = 0):
        if mode not in ("train", "eval"):
            raise ValueError(f"Modalità nastro sconosciuta: {mode}")
        self.mode = mode
        self.seed = int(seed)
        self.nodes: List[Node] = []
        self.leaves: Dict[str, Tensor] = {}
        self.outputs: Dict[str, Tensor] = {}
        self._dropout_calls = 0

    @property
    def training(self) -> bool:
        return self.mode == "train"

    # ----------------------------------------------------------
    # Foglie e costanti
    # ----------------------------------------------------------

    def leaf(self, name: str, tensor: Tensor) -> Tensor:
        """Registra un input con nome (rigiocabile da forward_eval)."""
        if not np.all(np.isfinite(tensor.data)):
            raise NumericError(f"Input '{name}' contiene NaN/Inf")
        tensor.name = tensor.name or name
        self.leaves[name] = tensor
        return tensor

    def constant(self, data: Any) -> Tensor:
        return Tensor(data, requires_grad=False)

    def output(self, name: str, tensor: Tensor) -> Tensor:
        self.outputs[name] = tensor
        return tensor

    # ----------------------------------------------------------
    # Registrazione
    # ----------------------------------------------------------

    def record(self, kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
        opdef = OPS[kind]
        op = PrimitiveOp(kind, attrs)
        ctx: Dict[str, Any] = {}
        data = opdef.forward([t.data for t in inputs], attrs, ctx)
        out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
        out._tape_id = id(self)
        self.nodes.append(Node(op=op, inputs=tuple(inputs), output=out, ctx=ctx))
        return out

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.record("matmul", (a, b))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self.record("add", (a, b))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.add(a, self.scale(b, -1.0))

    def multiply(self, a: Tensor, b: Tensor) -> Tensor:
        return self.record("multiply", (a, b))

    def scale(self, x: Tensor, factor: float) -> Tensor:
        return self.record("scalar-scale", (x,), factor=float(factor))

    def relu(self, x: Tensor) -> Tensor:
        return self.record("relu", (x,))

    def gelu(self, x: Tensor) -> Tensor:
        return self.record("gelu", (x,))

    def sigmoid(self, x: Tensor) -> Tensor:
        return self.record("sigmoid", (x,))

    def tanh(self, x: Tensor) -> Tensor:
        return self.record("tanh", (x,))

    def abs(self, x: Tensor) -> Tensor:
        return self.record("abs", (x,))

    def softplus(self, x: Tensor) -> Tensor:
        return self.record("softplus", (x,))

    def softmax(self, x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.record("softmax", (x,), axis=axis, mask=mask)

    def log_softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        return self.record("log-softmax", (x,), axis=axis)

    def layer_norm(self, x: Tensor, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
        return self.record("layer-norm", (x,), axis=axis, eps=eps)

    def dropout(self, x: Tensor, rate: float) -> Tensor:
        """Inverted dropout; identità in eval o con rate == 0."""
        mask = None
        if self.training and rate > 0.0:
            counter = self._dropout_calls << 64
            rng = np.random.Generator(np.random.Philox(counter=counter, key=self.seed))
            keep = rng.random(x.shape) >= rate
            mask = keep / (1.0 - rate)
            self._dropout_calls += 1
        return self.record("dropout", (x,), rate=float(rate), mask=mask)

    def concat(self, xs: Sequence[Tensor], axis: int) -> Tensor:
        return self.record("concat", tuple(xs), axis=axis)

    def slice(self, x: Tensor, key: Any) -> Tensor:
        return self.record("slice", (x,), key=key)

    def reduce_sum(self, x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
        return self.record("reduce-sum", (x,), axis=axis, keepdims=keepdims)

    def reduce_mean(self, x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
        return self.record("reduce-mean", (x,), axis=axis, keepdims=keepdims)

    def embedding_select(self, table: Tensor, indices: Any) -> Tensor:
        return self.record("embedding-select", (table,), indices=np.asarray(indices, dtype=np.int64))

    def transpose(self, x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
        return self.record("transpose", (x,), axes=None if axes is None else tuple(axes))

    def reshape(self, x: Tensor, shape: Sequence[int]) -> Tensor:
        return self.record("reshape", (x,), shape=tuple(shape))

    def affine(self, x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        y = self.matmul(x, weight)
        return y if bias is None else self.add(y, bias)


# ============================================================
# FORWARD / BACKWARD
# ============================================================

def forward_eval(tape: GraphTape, inputs: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    """
    Rigioca il nastro con nuovi valori per le foglie nominate.
    Le maschere di dropout registrate vengono riusate (rigioco deterministico).
    """
    for name, value in inputs.items():
        if name not in tape.leaves:
            raise TapeError(f"Input sconosciuto per il nastro: '{name}'")
        leaf = tape.leaves[name]
        data = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        if data.shape != leaf.shape:
            raise ShapeError(f"Input '{name}': forma {data.shape}, attesa {leaf.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericError(f"Input '{name}' contiene NaN/Inf")
        leaf.data = data.copy()
    for node in tape.nodes:
        try:
            node.output.data = OPS[node.op.kind].forward(
                [t.data for t in node.inputs], node.op.attrs, node.ctx)
        except ShapeError as e:
            raise ShapeError(f"{node.op.kind}: {e}") from None
    return dict(tape.outputs)


def backward_grads(tape: GraphTape, loss: Tensor,
                   params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """
    Accumulazione inversa dalla loss scalare.
    Ritorna i gradienti per nome (params + foglie del nastro); parametri fuori cammino → zeri esatti.
    """
    if loss.data.size != 1:
        raise TapeError(f"La loss deve essere scalare, forma {loss.shape}")
    if not tape.nodes or loss._tape_id != id(tape):
        raise TapeError("backward prima del forward: la loss non è stata registrata su questo nastro")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        if not any(t.requires_grad for t in node.inputs):
            continue
        in_grads = OPS[node.op.kind].vjp(
            g, [t.data for t in node.inputs], node.output.data, node.op.attrs, node.ctx)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    named: Dict[str, Tensor] = dict(tape.leaves)
    if params:
        named.update(params)
    result: Dict[str, np.ndarray] = {}
    for name, t in named.items():
        if not t.requires_grad:
            continue
        g = grads.get(id(t))
        t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64).reshape(t.shape)
        result[name] = t.grad
    return result


def finite_diff_check(build: Callable[[GraphTape, Dict[str, Tensor]], Tensor],
                      point: Mapping[str, Any], eps: float = 1e-5,
                      mode: str = "eval", seed: int = 0) -> float:
    """
    Oracolo alle differenze centrali: max |analitico − numerico| / max(1, |analitico|)
    su tutte le componenti di tutti i tensori di `point`.
    """
    tape = GraphTape(mode=mode, seed=seed)
    leaves: Dict[str, Tensor] = {}
    for name, value in point.items():
        data = value.data if isinstance(value, Tensor) else value
        leaves[name] = tape.leaf(name, Tensor(data, requires_grad=True, name=name))
    loss = build(tape, leaves)
    if loss.data.size != 1:
        raise TapeError(f"La loss deve essere scalare, forma {loss.shape}")
    if loss._tape_id != id(tape):
        # funzione costante: nessuna dipendenza dai parametri
        return 0.0
    tape.output("loss", loss)
    analytic = backward_grads(tape, loss)
    base = {name: t.data.copy() for name, t in leaves.items()}

    max_err = 0.0
    for name, origin in base.items():
        flat = origin.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += eps
            minus = flat.copy()
            minus[i] -= eps
            f_plus = forward_eval(tape, {name: plus.reshape(origin.shape)})["loss"].item()
            f_minus = forward_eval(tape, {name: minus.reshape(origin.shape)})["loss"].item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(grad_flat[i] - numeric) / max(1.0, abs(grad_flat[i]))
            max_err = max(max_err, err)
        forward_eval(tape, {name: origin})
    logger.debug(f"finite_diff_check: max_rel_err={max_err:.3e} su {len(base)} tensori")
    return max_err
