# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Layer condivisi
Blocchi riusati da encoder, aggregatore e backbone:
- inizializzazione parametri (dizionari piatti nome → Tensor)
- affine, layer norm con guadagno/bias
- multi-head self-attention con maschera opzionale
- blocco transformer pre-norm (attenzione + feed-forward GELU)
"""

from __future__ import annotations

import math
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from stepembed.engine.diffcore import GraphTape, Tensor, parameter
from stepembed.engine.errors import ShapeError

Params = Dict[str, Tensor]

FFN_FACTOR = 2


# ============================================================
# PARAMETRI
# ============================================================

def sub_params(params: Mapping[str, Tensor], prefix: str) -> Params:
    """Vista dei parametri sotto `prefix.` con il prefisso rimosso."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def prefixed(params: Mapping[str, Tensor], prefix: str) -> Params:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Params:
    bound = 1.0 / math.sqrt(fan_in)
    return {
        f"{name}.w": parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out))),
        f"{name}.b": parameter(rng.uniform(-bound, bound, size=(fan_out,))),
    }


def init_layer_norm(dim: int, name: str) -> Params:
    return {f"{name}.g": parameter(np.ones(dim)), f"{name}.b": parameter(np.zeros(dim))}


def init_transformer_block(rng: np.random.Generator, dim: int, name: str) -> Params:
    params: Params = {}
    params.update(init_layer_norm(dim, f"{name}.ln1"))
    for proj in ("wq", "wk", "wv", "wo"):
        params.update(init_affine(rng, dim, dim, f"{name}.{proj}"))
    params.update(init_layer_norm(dim, f"{name}.ln2"))
    params.update(init_affine(rng, dim, FFN_FACTOR * dim, f"{name}.ff1"))
    params.update(init_affine(rng, FFN_FACTOR * dim, dim, f"{name}.ff2"))
    return params


# ============================================================
# LAYER
# ============================================================

def affine(tape: GraphTape, params: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return tape.affine(x, params[f"{name}.w"], params[f"{name}.b"])


def layer_norm(tape: GraphTape, params: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    y = tape.layer_norm(x, axis=-1)
    return tape.add(tape.multiply(y, params[f"{name}.g"]), params[f"{name}.b"])


def multi_head_attention(tape: GraphTape, params: Mapping[str, Tensor], name: str, x: Tensor,
                         heads: int, attention_dropout: float = 0.0,
                         mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Self-attention su x di forma (N, L, m).
    Ritorna (output (N, L, m), pesi di attenzione (N, heads, L, L)).
    mask (L, L) booleana: True = posizione visibile.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"{name}: attenzione su tensore 3-D (N, L, m), forma {x.shape}")
    n, length, dim = x.shape
    if dim % heads != 0:
        raise ShapeError(f"{name}: dimensione {dim} non divisibile per {heads} teste")
    dh = dim // heads

    def split(t: Tensor) -> Tensor:
        return tape.transpose(tape.reshape(t, (n, length, heads, dh)), (0, 2, 1, 3))

    q = split(affine(tape, params, f"{name}.wq", x))
    k = split(affine(tape, params, f"{name}.wk", x))
    v = split(affine(tape, params, f"{name}.wv", x))
    scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = tape.softmax(scores, axis=-1, mask=mask)
    attn = tape.matmul(tape.dropout(weights, attention_dropout), v)
    merged = tape.reshape(tape.transpose(attn, (0, 2, 1, 3)), (n, length, dim))
    return affine(tape, params, f"{name}.wo", merged), weights.data


def transformer_block(tape: GraphTape, params: Mapping[str, Tensor], name: str, x: Tensor,
                      heads: int, dropout: float = 0.0, attention_dropout: float = 0.0,
                      mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """Blocco pre-norm: x + Attn(LN(x)), poi x + FFN(LN(x)) con GELU."""
    h = layer_norm(tape, params, f"{name}.ln1", x)
    attn_out, weights = multi_head_attention(tape, params, name, h, heads, attention_dropout, mask)
    x = tape.add(x, tape.dropout(attn_out, dropout))
    h = layer_norm(tape, params, f"{name}.ln2", x)
    h = tape.gelu(affine(tape, params, f"{name}.ff1", h))
    h = affine(tape, params, f"{name}.ff2", tape.dropout(h, dropout))
    return tape.add(x, tape.dropout(h, dropout)), weights


def prepend_cls(tape: GraphTape, cls: Tensor, tokens: Tensor) -> Tensor:
    """Antepone il token [CLS] (riga 0) a tokens (N, L, m)."""
    n, _, dim = tokens.shape
    cls_rows = tape.add(tape.constant(np.zeros((n, 1, dim))), tape.reshape(cls, (1, 1, dim)))
    return tape.concat([cls_rows, tokens], axis=1)
