# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Interpretabilità via attenzione
Tre livelli letti dalla riga [CLS] delle matrici di attenzione:
- within   : importanza delle feature dentro ogni gruppo (transformer FTT del gruppo)
- between  : importanza dei gruppi (transformer dell'aggregatore)
- over_time: pesi fra gruppi step per step, per soggiorni richiesti

Riduzione di default: ultimo layer, media sulle teste. La massa di auto-attenzione del [CLS]
è riportata a parte, non rinormalizzata. Le medie non dipendono dalle label.
"""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from stepembed.data.datapipe import Stay, TimeSeriesDataset  # noqa: E402
from stepembed.engine.diffcore import GraphTape, Tensor  # noqa: E402
from stepembed.engine.errors import AttentionUnavailableError, DataError  # noqa: E402
from stepembed.models.schemas import ModelConfig  # noqa: E402
from stepembed.pipeline import embed_steps  # noqa: E402

logger = logging.getLogger("stepembed.explain")

LAYER_REDUCTIONS = ("last", "mean")
HEAD_REDUCTIONS = ("mean", "max")
CSV_FLOAT_FORMAT = "%.10f"
CLS_LABEL = "[CLS]"

plt.rcParams["svg.hashsalt"] = "stepembed"


@dataclass
class StayAttention:
    """Righe [CLS] per step: within[k] (T, |M_k|+1), between (T, K+1); colonna 0 = [CLS]."""
    within: List[np.ndarray]
    between: np.ndarray


@dataclass
class AttentionReport:
    group_names: List[str]
    feature_names: Dict[str, List[str]]
    within: Dict[str, np.ndarray]           # gruppo → pesi medi per feature
    within_cls: Dict[str, float]            # gruppo → massa media sul [CLS]
    between: np.ndarray                     # (K,)
    between_cls: float
    over_time: Dict[str, np.ndarray] = field(default_factory=dict)   # stay → (T, K+1), ultima colonna [CLS]
    provenance: Dict[str, str] = field(default_factory=dict)


# ============================================================
# ESTRAZIONE
# ============================================================

def check_attention_model(config: ModelConfig) -> None:
    """Errore se il modello non ha encoder FTT per gruppo e aggregazione ad attenzione."""
    if not config.grouped:
        raise AttentionUnavailableError("explain: modello senza raggruppamento (scenario D)")
    if config.encoder.kind != "ftt":
        raise AttentionUnavailableError(f"explain: encoder di gruppo '{config.encoder.kind}' senza attenzione")
    if config.aggregator.method != "attention":
        raise AttentionUnavailableError(
            f"explain: aggregazione '{config.aggregator.method}' senza attenzione")


def reduce_attention(layers: Sequence[np.ndarray], layer: str = "last", heads: str = "mean") -> np.ndarray:
    """Lista di pesi (N, h, L, L) per layer → riga [CLS] (N, L)."""
    if layer not in LAYER_REDUCTIONS:
        raise ValueError(f"Riduzione di layer sconosciuta: {layer}")
    if heads not in HEAD_REDUCTIONS:
        raise ValueError(f"Riduzione di teste sconosciuta: {heads}")
    stacked = layers[-1] if layer == "last" else np.mean(np.stack(layers), axis=0)
    per_head = stacked[:, :, 0, :]
    return per_head.mean(axis=1) if heads == "mean" else per_head.max(axis=1)


def extract_attention(config: ModelConfig, params: Mapping[str, Tensor], stay: Stay,
                      layer: str = "last", heads: str = "mean") -> StayAttention:
    check_attention_model(config)
    tape = GraphTape(mode="eval")
    x = tape.leaf("x", Tensor(stay.X))
    emb = embed_steps(tape, config, params, x)
    within = [reduce_attention(layers, layer, heads) for layers in emb.group_attention]
    between = reduce_attention(emb.aggregator_attention, layer, heads)
    return StayAttention(within=within, between=between)


def _exact_mean(per_stay_sums: List[np.ndarray], count: int) -> np.ndarray:
    """Somma esatta (indipendente dall'ordine) fra soggiorni, poi media."""
    stacked = np.stack(per_stay_sums)
    return np.array([math.fsum(stacked[:, j]) for j in range(stacked.shape[1])]) / count


def aggregate_report(config: ModelConfig, params: Mapping[str, Tensor], dataset: TimeSeriesDataset,
                     split: str = "test", stay_ids: Optional[Sequence[str]] = None,
                     layer: str = "last", heads: str = "mean",
                     checkpoint_id: str = "") -> AttentionReport:
    """Media aritmetica su tutti gli step validi di tutti i soggiorni dello split."""
    check_attention_model(config)
    stays = dataset.split(split)
    if not stays:
        raise DataError(f"explain: split '{split}' vuoto")
    wanted = set(stay_ids or [])
    unknown = wanted - {s.stay_id for s in dataset.stays}
    if unknown:
        raise DataError(f"explain: soggiorni sconosciuti {sorted(unknown)}")

    scheme = config.grouping
    within_sums: List[List[np.ndarray]] = [[] for _ in scheme.groups]
    between_sums: List[np.ndarray] = []
    over_time: Dict[str, np.ndarray] = {}
    n_steps = 0
    for stay in stays:
        att = extract_attention(config, params, stay, layer, heads)
        for k, w in enumerate(att.within):
            within_sums[k].append(w.sum(axis=0))
        between_sums.append(att.between.sum(axis=0))
        n_steps += stay.T
        if stay.stay_id in wanted:
            # colonne gruppi, poi [CLS]
            over_time[stay.stay_id] = np.concatenate([att.between[:, 1:], att.between[:, :1]], axis=1)
    for stay in dataset.by_id(sorted(wanted - set(over_time))):
        att = extract_attention(config, params, stay, layer, heads)
        over_time[stay.stay_id] = np.concatenate([att.between[:, 1:], att.between[:, :1]], axis=1)

    within, within_cls = {}, {}
    for k, group in enumerate(scheme.groups):
        mean = _exact_mean(within_sums[k], n_steps)
        within[group.name] = mean[1:]
        within_cls[group.name] = float(mean[0])
    between = _exact_mean(between_sums, n_steps)
    report = AttentionReport(
        group_names=scheme.group_names,
        feature_names={g.name: [dataset.feature_names[i] for i in g.indices] for g in scheme.groups},
        within=within, within_cls=within_cls, between=between[1:], between_cls=float(between[0]),
        over_time=over_time,
        provenance={"checkpoint": checkpoint_id, "split": split, "layer": layer, "heads": heads,
                    "stays": str(len(stays)), "steps": str(n_steps)})
    logger.info(f"🔍 Report di attenzione: {len(stays)} soggiorni, {n_steps} step, split={split}")
    return report


# ============================================================
# EMISSIONE
# ============================================================

def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def _bar_chart(path: Path, labels: Sequence[str], values: Sequence[float], title: str, xlabel: str) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(labels) + 2.0), 3.5))
    ax.bar(range(len(labels)), values, color="#3b6ea5")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean attention weight")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _line_chart(path: Path, frame: pd.DataFrame, columns: Sequence[str], title: str) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    for col in columns:
        ax.plot(frame["time"], frame[col], label=col)
    ax.set_xlabel("time step")
    ax.set_ylabel("attention weight")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(report: AttentionReport, out_dir: os.PathLike, charts: bool = True) -> List[Path]:
    """CSV (feature,weight | group,weight | time,<gruppi>) + grafici SVG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    for group in report.group_names:
        path = out / f"within_{_safe_name(group)}.csv"
        frame = pd.DataFrame({"feature": report.feature_names[group], "weight": report.within[group]})
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        written.append(path)
        if charts:
            svg = path.with_suffix(".svg")
            _bar_chart(svg, frame["feature"].tolist(), frame["weight"].tolist(),
                       f"within-group attention: {group}", "feature")
            written.append(svg)

    path = out / "between.csv"
    frame = pd.DataFrame({"group": report.group_names, "weight": report.between})
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    written.append(path)
    if charts:
        _bar_chart(path.with_suffix(".svg"), report.group_names, report.between.tolist(),
                   "between-group attention", "group")
        written.append(path.with_suffix(".svg"))

    cls_rows = [{"component": f"within:{g}", "weight": report.within_cls[g]} for g in report.group_names]
    cls_rows.append({"component": "between", "weight": report.between_cls})
    path = out / "cls_mass.csv"
    pd.DataFrame(cls_rows).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    written.append(path)

    columns = list(report.group_names) + [CLS_LABEL]
    for stay_id in sorted(report.over_time):
        matrix = report.over_time[stay_id]
        frame = pd.DataFrame(matrix, columns=columns)
        frame.insert(0, "time", np.arange(matrix.shape[0]))
        path = out / f"over_time_{_safe_name(stay_id)}.csv"
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        written.append(path)
        if charts:
            _line_chart(path.with_suffix(".svg"), frame, report.group_names, f"attention over time: {stay_id}")
            written.append(path.with_suffix(".svg"))

    path = out / "provenance.csv"
    pd.DataFrame(sorted(report.provenance.items()), columns=["key", "value"]).to_csv(path, index=False)
    written.append(path)
    logger.info(f"🖼️ Report scritto in {out}: {len(written)} file")
    return written
