# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Modello completo
x_(1..T) → embedding step-wise (D: encoder unico | G: encoder per gruppo + aggregazione)
        → backbone causale → testa.

Nomi dei parametri:
  embedding.encoder.*        scenario D
  embedding.g{k}.*           encoder del gruppo k (scenario G)
  embedding.agg.*            aggregatore (scenario G)
  backbone.*                 modello sequenziale
  head.*                     testa di predizione
La regolarizzazione L1 agisce solo sul prefisso `embedding.`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from stepembed.embedding.encoders import encoder_forward, init_encoder_params
from stepembed.embedding.grouping import (
    aggregate, concept_embed, init_aggregator_params, init_group_params,
)
from stepembed.engine.diffcore import GraphTape, Tensor
from stepembed.engine.errors import ShapeError
from stepembed.engine.layers import Params, prefixed, sub_params
from stepembed.models.schemas import ModelConfig
from stepembed.sequence.backbones import (
    backbone_forward, init_backbone_params, init_head_params, predict,
)

EMBEDDING_PREFIX = "embedding"


@dataclass
class EmbedOutput:
    """Embedding (N, e) + attenzioni: per gruppo (lista di layer) e dell'aggregatore."""
    h: Tensor
    group_attention: List[List[np.ndarray]] = field(default_factory=list)
    aggregator_attention: List[np.ndarray] = field(default_factory=list)


@dataclass
class ModelOutput:
    predictions: Tensor
    embedding: EmbedOutput
    backbone_attention: List[np.ndarray] = field(default_factory=list)


def init_model_params(config: ModelConfig, seed: int = 0) -> Params:
    """Inizializzazione deterministica: stesso seed → stessi parametri."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    if config.grouped:
        params.update(prefixed(init_group_params(config.group_specs(), rng), EMBEDDING_PREFIX))
        params.update(prefixed(init_aggregator_params(config.aggregator, rng), f"{EMBEDDING_PREFIX}.agg"))
    else:
        params.update(prefixed(init_encoder_params(config.encoder, rng), f"{EMBEDDING_PREFIX}.encoder"))
    params.update(prefixed(init_backbone_params(config.backbone, rng), "backbone"))
    params.update(prefixed(init_head_params(config.backbone, rng), "head"))
    for name, tensor in params.items():
        tensor.name = name
    return params


def embedding_params(params: Mapping[str, Tensor]) -> Params:
    """Parametri del modulo di embedding (encoder + aggregatore)."""
    return {k: v for k, v in params.items() if k.startswith(EMBEDDING_PREFIX + ".")}


def embed_steps(tape: GraphTape, config: ModelConfig, params: Mapping[str, Tensor],
                x: Tensor) -> EmbedOutput:
    """Righe (N, d) → embedding (N, e)."""
    if x.data.ndim != 2 or x.shape[1] != config.n_features:
        raise ShapeError(f"embed_steps: input {x.shape}, atteso (N, {config.n_features})")
    emb = sub_params(params, EMBEDDING_PREFIX)
    if not config.grouped:
        out = encoder_forward(tape, config.encoder, sub_params(emb, "encoder"), x)
        return EmbedOutput(h=out.h, group_attention=[out.attention] if out.attention else [])

    specs = config.group_specs()
    concept = [concept_embed(tape, k, x, config.grouping, specs, emb) for k in range(config.grouping.n_groups)]
    agg = aggregate(tape, [c.h for c in concept], config.aggregator, sub_params(emb, "agg"))
    return EmbedOutput(h=agg.h, group_attention=[c.attention for c in concept],
                       aggregator_attention=agg.attention)


def per_stay_steps(lengths: Sequence[int], stay_step: Optional[int]) -> np.ndarray:
    """Step letto per ogni soggiorno: stay_step se disponibile, altrimenti l'ultimo osservato."""
    last = np.asarray(lengths, dtype=np.int64) - 1
    if stay_step is None:
        return last
    return np.minimum(last, int(stay_step))


def model_forward(tape: GraphTape, config: ModelConfig, params: Mapping[str, Tensor], X: Tensor,
                  lengths: Optional[Sequence[int]] = None) -> ModelOutput:
    """X (B, T, d) → predizioni per step (B, T[, C]) o per soggiorno (B[, C])."""
    if X.data.ndim != 3 or X.shape[2] != config.n_features:
        raise ShapeError(f"model_forward: input {X.shape}, atteso (B, T, {config.n_features})")
    b, t_len, d = X.shape
    emb = embed_steps(tape, config, params, tape.reshape(X, (b * t_len, d)))
    H = tape.reshape(emb.h, (b, t_len, config.embedding_dim))

    backbone_attention: List[np.ndarray] = []
    hidden = backbone_forward(tape, config.backbone, sub_params(params, "backbone"), H, backbone_attention)

    step_index = None
    if config.backbone.prediction_mode == "per_stay":
        step_index = per_stay_steps(lengths if lengths is not None else [t_len] * b,
                                    config.backbone.stay_step)
    preds = predict(tape, config.backbone, sub_params(params, "head"), hidden, step_index)
    return ModelOutput(predictions=preds, embedding=emb, backbone_attention=backbone_attention)


def parameter_count(params: Mapping[str, Tensor]) -> Dict[str, int]:
    """Numero di parametri per modulo di primo livello."""
    counts: Dict[str, int] = {}
    for name, tensor in params.items():
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + tensor.size
    return counts
