# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Backbone sequenziali causali
Consumano la sequenza di embedding H (B, T, e) e producono stati nascosti (B, T, hidden):
- gru         : GRU a depth layer, stato iniziale nullo
- transformer : affine + encoding sinusoidale + blocchi pre-norm con maschera causale
- tcn         : blocchi residui di convoluzioni causali dilatate (padding a sinistra)

predict applica la testa: per_step su ogni t, per_stay su un solo step per soggiorno.
In tutti i casi l'uscita al tempo t dipende solo dagli input ≤ t.
"""

from __future__ import annotations

import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from stepembed.engine.diffcore import GraphTape, Tensor, parameter
from stepembed.engine.errors import ShapeError
from stepembed.engine.layers import (
    Params, affine, init_affine, init_layer_norm, init_transformer_block,
    layer_norm, transformer_block,
)
from stepembed.models.schemas import BackboneSpec

logger = logging.getLogger("stepembed.backbones")

GRU_GATES = ("z", "r", "n")


# ============================================================
# INIZIALIZZAZIONE
# ============================================================

def init_backbone_params(spec: BackboneSpec, rng: np.random.Generator) -> Params:
    params: Params = {}
    h = spec.hidden_dim
    if spec.kind == "gru":
        fan_in = spec.input_dim
        for i in range(spec.depth):
            bound = 1.0 / math.sqrt(h)
            for gate in GRU_GATES:
                params[f"layers.{i}.w{gate}"] = parameter(rng.uniform(-bound, bound, size=(fan_in, h)))
                params[f"layers.{i}.u{gate}"] = parameter(rng.uniform(-bound, bound, size=(h, h)))
                params[f"layers.{i}.b{gate}"] = parameter(rng.uniform(-bound, bound, size=(h,)))
            fan_in = h
    elif spec.kind == "transformer":
        params.update(init_affine(rng, spec.input_dim, h, "input"))
        for i in range(spec.depth):
            params.update(init_transformer_block(rng, h, f"blocks.{i}"))
        params.update(init_layer_norm(h, "ln_out"))
    elif spec.kind == "tcn":
        params.update(init_affine(rng, spec.input_dim, h, "input"))
        bound = 1.0 / math.sqrt(h * spec.kernel_size)
        for i in range(spec.depth):
            params[f"blocks.{i}.w"] = parameter(
                rng.uniform(-bound, bound, size=(spec.kernel_size, h, h)))
            params[f"blocks.{i}.b"] = parameter(rng.uniform(-bound, bound, size=(h,)))
    else:
        raise ValueError(f"Backbone sconosciuto: {spec.kind}")
    return params


def init_head_params(spec: BackboneSpec, rng: np.random.Generator) -> Params:
    return init_affine(rng, spec.hidden_dim, spec.output_dim, "out")


def _check_input(spec: BackboneSpec, H: Tensor) -> Tuple[int, int]:
    if H.data.ndim != 3 or H.shape[2] != spec.input_dim:
        raise ShapeError(f"backbone {spec.kind}: input {H.shape}, atteso (B, T, {spec.input_dim})")
    if H.shape[1] < 1:
        raise ShapeError(f"backbone {spec.kind}: sequenza vuota")
    return H.shape[0], H.shape[1]


def _stack_time(tape: GraphTape, steps: Sequence[Tensor]) -> Tensor:
    """Lista di T tensori (B, h) → (B, T, h)."""
    b, h = steps[0].shape
    return tape.concat([tape.reshape(s, (b, 1, h)) for s in steps], axis=1)


# ============================================================
# GRU
# ============================================================

def gru_forward(tape: GraphTape, spec: BackboneSpec, params: Mapping[str, Tensor], H: Tensor) -> Tensor:
    """
    z = σ(x·Wz + h·Uz + bz), r = σ(x·Wr + h·Ur + br)
    n = tanh(x·Wn + bn + r ⊙ (h·Un)), h' = (1 − z) ⊙ n + z ⊙ h
    """
    b, t_len = _check_input(spec, H)
    x = H
    for i in range(spec.depth):
        p = f"layers.{i}"
        # proiezioni dell'input precalcolate su tutta la sequenza
        xz = tape.affine(x, params[f"{p}.wz"], params[f"{p}.bz"])
        xr = tape.affine(x, params[f"{p}.wr"], params[f"{p}.br"])
        xn = tape.affine(x, params[f"{p}.wn"], params[f"{p}.bn"])
        h = tape.constant(np.zeros((b, spec.hidden_dim)))
        states: List[Tensor] = []
        for t in range(t_len):
            at_t = (slice(None), t, slice(None))
            z = tape.sigmoid(tape.add(tape.slice(xz, at_t), tape.matmul(h, params[f"{p}.uz"])))
            r = tape.sigmoid(tape.add(tape.slice(xr, at_t), tape.matmul(h, params[f"{p}.ur"])))
            n = tape.tanh(tape.add(tape.slice(xn, at_t),
                                   tape.multiply(r, tape.matmul(h, params[f"{p}.un"]))))
            one_minus_z = tape.add(tape.scale(z, -1.0), tape.constant(1.0))
            h = tape.add(tape.multiply(one_minus_z, n), tape.multiply(z, h))
            states.append(h)
        x = _stack_time(tape, states)
        if i < spec.depth - 1:
            x = tape.dropout(x, spec.dropout)
    return x


# ============================================================
# TRANSFORMER CAUSALE
# ============================================================

def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """pe[t, 2i] = sin(t / 10000^(2i/dim)), pe[t, 2i+1] = cos(...)."""
    pe = np.zeros((length, dim))
    position = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div)[:, : dim // 2]
    return pe


def causal_mask(length: int) -> np.ndarray:
    """Triangolare inferiore: la query t vede le chiavi ≤ t."""
    return np.tril(np.ones((length, length), dtype=bool))


def transformer_forward(tape: GraphTape, spec: BackboneSpec, params: Mapping[str, Tensor],
                        H: Tensor, attention: Optional[List[np.ndarray]] = None) -> Tensor:
    _, t_len = _check_input(spec, H)
    if spec.hidden_dim % spec.heads != 0:
        raise ShapeError(f"hidden_dim {spec.hidden_dim} non divisibile per heads {spec.heads}")
    x = affine(tape, params, "input", H)
    x = tape.add(x, tape.constant(sinusoidal_encoding(t_len, spec.hidden_dim)))
    x = tape.dropout(x, spec.dropout)
    mask = causal_mask(t_len)
    for i in range(spec.depth):
        x, weights = transformer_block(tape, params, f"blocks.{i}", x, spec.heads,
                                       spec.dropout, spec.attention_dropout, mask=mask)
        if attention is not None:
            attention.append(weights)
    return layer_norm(tape, params, "ln_out", x)


# ============================================================
# TCN
# ============================================================

def receptive_field(kernel_size: int, dilation_base: int, depth: int) -> int:
    """1 + Σ_i (k − 1) · base^i."""
    return 1 + sum((kernel_size - 1) * dilation_base ** i for i in range(depth))


def tcn_depth_for(T: int, kernel_size: int = 2, dilation_base: int = 2, max_depth: int = 16) -> int:
    """Profondità minima il cui campo recettivo copre T step."""
    depth = 1
    while receptive_field(kernel_size, dilation_base, depth) < T and depth < max_depth:
        depth += 1
    return depth


def causal_conv(tape: GraphTape, x: Tensor, weight: Tensor, bias: Tensor, dilation: int) -> Tensor:
    """
    out_t = Σ_j x_(t − j·dilation) · W_j + b, con zeri per t − j·dilation < 0.
    x (B, T, c), W (k, c, c') → (B, T, c').
    """
    b, t_len, c = x.shape
    k = weight.shape[0]
    pad = (k - 1) * dilation
    padded = x if pad == 0 else tape.concat([tape.constant(np.zeros((b, pad, c))), x], axis=1)
    out = None
    for j in range(k):
        start = pad - j * dilation
        shifted = tape.slice(padded, (slice(None), slice(start, start + t_len), slice(None)))
        term = tape.matmul(shifted, tape.slice(weight, j))
        out = term if out is None else tape.add(out, term)
    return tape.add(out, bias)


def tcn_forward(tape: GraphTape, spec: BackboneSpec, params: Mapping[str, Tensor], H: Tensor,
                report: Optional[Dict[str, int]] = None) -> Tensor:
    """
    A = affine(H), poi per blocco: x + dropout(ReLU(conv causale dilatata base^i)).
    report (opzionale) riceve depth e receptive_field.
    """
    _check_input(spec, H)
    if report is not None:
        report["depth"] = spec.depth
        report["receptive_field"] = receptive_field(spec.kernel_size, spec.dilation_base, spec.depth)
    x = affine(tape, params, "input", H)
    for i in range(spec.depth):
        conv = causal_conv(tape, x, params[f"blocks.{i}.w"], params[f"blocks.{i}.b"],
                           spec.dilation_base ** i)
        x = tape.add(x, tape.dropout(tape.relu(conv), spec.dropout))
    return x


def backbone_forward(tape: GraphTape, spec: BackboneSpec, params: Mapping[str, Tensor], H: Tensor,
                     attention: Optional[List[np.ndarray]] = None) -> Tensor:
    """Dispatcher per tipo di backbone."""
    if spec.kind == "gru":
        return gru_forward(tape, spec, params, H)
    if spec.kind == "transformer":
        return transformer_forward(tape, spec, params, H, attention)
    if spec.kind == "tcn":
        return tcn_forward(tape, spec, params, H)
    raise ValueError(f"Backbone sconosciuto: {spec.kind}")


# ============================================================
# TESTA DI PREDIZIONE
# ============================================================

def predict(tape: GraphTape, spec: BackboneSpec, params: Mapping[str, Tensor], hidden: Tensor,
            step_index: Optional[Sequence[int]] = None) -> Tensor:
    """
    per_step → (B, T) o (B, T, C); per_stay → (B,) o (B, C).
    step_index: uno step per soggiorno (default: ultimo step della sequenza).
    """
    if hidden.data.ndim != 3 or hidden.shape[2] != spec.hidden_dim:
        raise ShapeError(f"predict: hidden {hidden.shape}, atteso (B, T, {spec.hidden_dim})")
    b, t_len, h = hidden.shape
    c = spec.output_dim
    if spec.prediction_mode == "per_step":
        out = affine(tape, params, "out", hidden)
        return out if spec.head_kind == "multiclass" else tape.reshape(out, (b, t_len))

    steps = np.full(b, t_len - 1, dtype=np.int64) if step_index is None \
        else np.asarray(step_index, dtype=np.int64)
    if steps.shape != (b,):
        raise ShapeError(f"predict: {steps.shape[0]} indici di step per {b} soggiorni")
    if steps.min() < 0 or steps.max() >= t_len:
        raise ShapeError(f"predict: step_index fuori da [0, {t_len}): {steps.tolist()}")
    rows = tape.embedding_select(tape.reshape(hidden, (b * t_len, h)), np.arange(b) * t_len + steps)
    out = affine(tape, params, "out", rows)
    return out if spec.head_kind == "multiclass" else tape.reshape(out, (b,))
