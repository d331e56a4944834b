# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Encoder step-wise f_θ
Da vettore di feature (o fetta di gruppo) a embedding del time-step:
- none   : identità (backbone sulle feature grezze)
- linear : singola mappa affine
- mlp    : depth × (affine → ReLU → dropout) → affine
- resnet : stem affine + blocchi residui (affine → ReLU → affine) + testa affine
- ftt    : Feature Tokenizer + Transformer sui d token + [CLS] (riga 0)

Tutti gli encoder lavorano su righe (N, d): N = batch × tempo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Mapping

import numpy as np

from stepembed.engine.diffcore import GraphTape, Tensor, parameter
from stepembed.engine.errors import ShapeError
from stepembed.engine.layers import (
    Params, affine, init_affine, init_layer_norm, init_transformer_block,
    layer_norm, prepend_cls, transformer_block,
)
from stepembed.models.schemas import EncoderSpec

CLS_INDEX = 0


@dataclass
class EncoderOutput:
    """Embedding h_t (N, output_dim) + pesi di attenzione per layer (solo ftt)."""
    h: Tensor
    attention: List[np.ndarray] = field(default_factory=list)


# ============================================================
# INIZIALIZZAZIONE
# ============================================================

def init_encoder_params(spec: EncoderSpec, rng: np.random.Generator) -> Params:
    """Parametri dell'encoder con nomi locali (senza prefisso)."""
    params: Params = {}
    if spec.kind == "none":
        return params
    if spec.kind == "linear":
        params.update(init_affine(rng, spec.input_dim, spec.output_dim, "out"))
    elif spec.kind == "mlp":
        fan_in = spec.input_dim
        for i in range(spec.depth):
            params.update(init_affine(rng, fan_in, spec.hidden_dim, f"layers.{i}"))
            fan_in = spec.hidden_dim
        params.update(init_affine(rng, fan_in, spec.output_dim, "out"))
    elif spec.kind == "resnet":
        params.update(init_affine(rng, spec.input_dim, spec.hidden_dim, "stem"))
        for i in range(spec.depth):
            params.update(init_affine(rng, spec.hidden_dim, spec.hidden_dim, f"blocks.{i}.fc1"))
            params.update(init_affine(rng, spec.hidden_dim, spec.hidden_dim, f"blocks.{i}.fc2"))
        params.update(init_affine(rng, spec.hidden_dim, spec.output_dim, "out"))
    elif spec.kind == "ftt":
        m = spec.token_dim
        bound = 1.0 / math.sqrt(m)
        params["tok.w"] = parameter(rng.uniform(-bound, bound, size=(spec.input_dim, m)))
        params["tok.b"] = parameter(rng.uniform(-bound, bound, size=(spec.input_dim, m)))
        params["cls"] = parameter(rng.uniform(-bound, bound, size=(m,)))
        for i in range(spec.depth):
            params.update(init_transformer_block(rng, m, f"blocks.{i}"))
        params.update(init_layer_norm(m, "ln_out"))
        params.update(init_affine(rng, m, spec.output_dim, "out"))
    else:
        raise ValueError(f"Encoder sconosciuto: {spec.kind}")
    return params


def _check_input(spec: EncoderSpec, x: Tensor) -> None:
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"encoder {spec.kind}: input {x.shape}, atteso (N, {spec.input_dim})")


# ============================================================
# FEATURE TOKENIZER + TRANSFORMER
# ============================================================

def feature_tokenize(tape: GraphTape, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Riga j del token = x_j · W_j + b_j.
    x (N, d), W (d, m), b (d, m) → token (N, d, m), senza [CLS].
    """
    if x.data.ndim != 2 or weight.data.ndim != 2 or weight.shape != bias.shape \
            or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"feature_tokenize: x {x.shape}, W {weight.shape}, b {bias.shape} incompatibili")
    n, d = x.shape
    scaled = tape.multiply(tape.reshape(x, (n, d, 1)), weight)
    return tape.add(scaled, bias)


def ftt_forward(tape: GraphTape, spec: EncoderSpec, params: Mapping[str, Tensor],
                x: Tensor) -> EncoderOutput:
    """Token + [CLS] → depth blocchi pre-norm senza encoding posizionale → affine(CLS)."""
    if spec.kind != "ftt":
        raise ValueError(f"ftt_forward su encoder {spec.kind}")
    if spec.token_dim % spec.heads != 0:
        raise ShapeError(f"token_dim {spec.token_dim} non divisibile per heads {spec.heads}")
    _check_input(spec, x)
    tokens = feature_tokenize(tape, x, params["tok.w"], params["tok.b"])
    h = prepend_cls(tape, params["cls"], tokens)
    attention: List[np.ndarray] = []
    for i in range(spec.depth):
        h, weights = transformer_block(tape, params, f"blocks.{i}", h, spec.heads,
                                       spec.dropout, spec.attention_dropout)
        attention.append(weights)
    cls_out = tape.slice(h, (slice(None), CLS_INDEX, slice(None)))
    cls_out = layer_norm(tape, params, "ln_out", cls_out)
    return EncoderOutput(h=affine(tape, params, "out", cls_out), attention=attention)


# ============================================================
# ENCODER DENSI
# ============================================================

def dense_encoder_forward(tape: GraphTape, spec: EncoderSpec, params: Mapping[str, Tensor],
                          x: Tensor) -> Tensor:
    _check_input(spec, x)
    if spec.kind == "none":
        return x
    if spec.kind == "linear":
        return affine(tape, params, "out", x)
    if spec.kind == "mlp":
        h = x
        for i in range(spec.depth):
            h = tape.dropout(tape.relu(affine(tape, params, f"layers.{i}", h)), spec.dropout)
        return affine(tape, params, "out", h)
    if spec.kind == "resnet":
        h = affine(tape, params, "stem", x)
        for i in range(spec.depth):
            r = tape.relu(affine(tape, params, f"blocks.{i}.fc1", h))
            r = affine(tape, params, f"blocks.{i}.fc2", tape.dropout(r, spec.dropout))
            h = tape.add(h, tape.dropout(r, spec.dropout))
        return affine(tape, params, "out", h)
    raise ValueError(f"dense_encoder_forward su encoder {spec.kind}")


def encoder_forward(tape: GraphTape, spec: EncoderSpec, params: Mapping[str, Tensor],
                    x: Tensor) -> EncoderOutput:
    """Dispatcher per tipo di encoder."""
    if spec.kind == "ftt":
        return ftt_forward(tape, spec, params, x)
    return EncoderOutput(h=dense_encoder_forward(tape, spec, params, x))

