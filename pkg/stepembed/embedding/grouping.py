# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Raggruppamento per concetti (scenario G)
- validate_partition: copertura, disgiunzione, gruppi non vuoti
- concept_embed: fetta x_(M_k, t) nell'ordine dichiarato → encoder f_θk
- aggregate: g_ψ = mean | sum | concat | attention ([CLS] sui K token di gruppo)

La concatenazione dipende dall'ordine dei gruppi; mean, sum e attention no.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Mapping, Sequence

import numpy as np

from stepembed.embedding.encoders import EncoderOutput, encoder_forward
from stepembed.engine.diffcore import GraphTape, Tensor, parameter
from stepembed.engine.errors import PartitionError, ShapeError
from stepembed.engine.layers import (
    Params, affine, init_affine, init_layer_norm, init_transformer_block,
    layer_norm, prepend_cls, sub_params, transformer_block,
)
from stepembed.models.schemas import AggregatorSpec, EncoderSpec, FeatureGroup, GroupingScheme

logger = logging.getLogger("stepembed.grouping")


@dataclass
class AggregateOutput:
    """h_t (N, output_dim) + pesi di attenzione per layer (solo attention)."""
    h: Tensor
    attention: List[np.ndarray] = field(default_factory=list)


# ============================================================
# PARTIZIONE
# ============================================================

def validate_partition(scheme: GroupingScheme, d: int) -> bool:
    """True se i gruppi coprono {0..d−1}, sono disgiunti e non vuoti; altrimenti PartitionError."""
    if not scheme.groups:
        raise PartitionError("Schema senza gruppi (K ≥ 1 richiesto)", empty=[])
    empty = [g.name for g in scheme.groups if not g.indices]
    if empty:
        raise PartitionError(f"Gruppi vuoti: {empty}", empty=empty)
    counts = Counter(i for g in scheme.groups for i in g.indices)
    out_of_range = sorted(i for i in counts if i < 0 or i >= d)
    if out_of_range:
        raise PartitionError(f"Indici fuori da [0, {d}): {out_of_range}", duplicated=[],
                             missing=[])
    duplicated = sorted(i for i, c in counts.items() if c > 1)
    if duplicated:
        raise PartitionError(f"Indici assegnati a più gruppi: {duplicated}", duplicated=duplicated)
    missing = sorted(set(range(d)) - set(counts))
    if missing:
        raise PartitionError(f"Indici non coperti da alcun gruppo: {missing}", missing=missing)
    return True


def single_group_scheme(d: int, name: str = "none") -> GroupingScheme:
    """Un solo gruppo che copre tutte le feature."""
    return GroupingScheme(name=name, groups=[FeatureGroup(name="all", indices=list(range(d)))])


def scheme_from_assignments(name: str, feature_names: Sequence[str],
                            assignments: Mapping[str, str]) -> GroupingScheme:
    """Schema da mappa feature → gruppo; ordine dei gruppi = prima apparizione, feature in ordine di colonna."""
    position = {f: i for i, f in enumerate(feature_names)}
    unknown = sorted(set(assignments) - set(position))
    if unknown:
        raise PartitionError(f"Feature sconosciute nel file dei gruppi: {unknown}")
    order: List[str] = []
    members: dict = {}
    for feat in feature_names:
        group = assignments.get(feat)
        if group is None:
            continue
        if group not in members:
            order.append(group)
            members[group] = []
        members[group].append(position[feat])
    scheme = GroupingScheme(name=name, groups=[FeatureGroup(name=g, indices=members[g]) for g in order])
    validate_partition(scheme, len(feature_names))
    return scheme


# ============================================================
# EMBEDDING DI CONCETTO
# ============================================================

def init_group_params(specs: Sequence[EncoderSpec], rng: np.random.Generator) -> Params:
    from stepembed.embedding.encoders import init_encoder_params
    params: Params = {}
    for k, spec in enumerate(specs):
        params.update({f"g{k}.{n}": t for n, t in init_encoder_params(spec, rng).items()})
    return params


def concept_embed(tape: GraphTape, k: int, x: Tensor, scheme: GroupingScheme,
                  specs: Sequence[EncoderSpec], params: Mapping[str, Tensor]) -> EncoderOutput:
    """h_(M_k, t) = f_θk(x_(M_k, t)); parametri θ_k sotto il prefisso `g{k}`."""
    if k < 0 or k >= scheme.n_groups:
        raise ShapeError(f"Gruppo {k} fuori da [0, {scheme.n_groups})")
    indices = np.asarray(scheme.groups[k].indices, dtype=np.int64)
    if indices.max() >= x.shape[1] or indices.min() < 0:
        raise ShapeError(f"Gruppo {k}: indici {indices.tolist()} fuori da [0, {x.shape[1]})")
    spec = specs[k]
    if spec.input_dim != len(indices):
        raise ShapeError(f"Gruppo {k}: encoder input_dim {spec.input_dim} != |M_k| {len(indices)}")
    x_k = tape.slice(x, (slice(None), indices))
    return encoder_forward(tape, spec, sub_params(params, f"g{k}"), x_k)


# ============================================================
# AGGREGAZIONE
# ============================================================

def init_aggregator_params(spec: AggregatorSpec, rng: np.random.Generator) -> Params:
    params: Params = {}
    if spec.method in ("mean", "sum"):
        params.update(init_affine(rng, spec.group_dim, spec.output_dim, "out"))
    elif spec.method == "concat":
        params.update(init_affine(rng, spec.n_groups * spec.group_dim, spec.output_dim, "out"))
    elif spec.method == "attention":
        bound = 1.0 / math.sqrt(spec.group_dim)
        params["cls"] = parameter(rng.uniform(-bound, bound, size=(spec.group_dim,)))
        for i in range(spec.agg_depth):
            params.update(init_transformer_block(rng, spec.group_dim, f"blocks.{i}"))
        params.update(init_layer_norm(spec.group_dim, "ln_out"))
        params.update(init_affine(rng, spec.group_dim, spec.output_dim, "out"))
    else:
        raise ValueError(f"Aggregazione sconosciuta: {spec.method}")
    return params


def aggregate(tape: GraphTape, h_list: Sequence[Tensor], spec: AggregatorSpec,
              params: Mapping[str, Tensor]) -> AggregateOutput:
    """Combina i K embedding di concetto (N, e) in h_t (N, output_dim)."""
    if len(h_list) != spec.n_groups:
        raise ShapeError(f"aggregate: {len(h_list)} embedding, attesi {spec.n_groups}")
    for k, h in enumerate(h_list):
        if h.data.ndim != 2 or h.shape[1] != spec.group_dim:
            raise ShapeError(f"aggregate: embedding {k} di forma {h.shape}, atteso (N, {spec.group_dim})")

    if spec.method == "concat":
        joined = tape.concat(list(h_list), axis=1)
        return AggregateOutput(h=affine(tape, params, "out", joined))

    n = h_list[0].shape[0]
    stacked = tape.concat([tape.reshape(h, (n, 1, spec.group_dim)) for h in h_list], axis=1)
    if spec.method == "mean":
        return AggregateOutput(h=affine(tape, params, "out", tape.reduce_mean(stacked, axis=1)))
    if spec.method == "sum":
        return AggregateOutput(h=affine(tape, params, "out", tape.reduce_sum(stacked, axis=1)))

    # attention: [CLS] + K token di gruppo, senza encoding posizionale
    h = prepend_cls(tape, params["cls"], stacked)
    attention: List[np.ndarray] = []
    for i in range(spec.agg_depth):
        h, weights = transformer_block(tape, params, f"blocks.{i}", h, spec.agg_heads,
                                       spec.dropout, spec.attention_dropout)
        attention.append(weights)
    cls_out = layer_norm(tape, params, "ln_out", tape.slice(h, (slice(None), 0, slice(None))))
    return AggregateOutput(h=affine(tape, params, "out", cls_out), attention=attention)
