# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Metriche di valutazione
- auprc (average precision, soglie con pari punteggio raggruppate), auroc
- balanced_accuracy (media delle recall per classe presente)
- mae_hours, cohen_kappa (nessun peso | pesi lineari) sui bucket di length-of-stay
Implementazioni di scikit-learn, con controlli di definizione espliciti.
"""

from __future__ import annotations

import logging
import math
import warnings
from typing import Dict, Optional, Sequence

import numpy as np
from sklearn.metrics import (
    average_precision_score, balanced_accuracy_score, confusion_matrix, roc_auc_score,
)

from stepembed.config.defaults import LOS_BIN_EDGES_HOURS, TASK_ROUTING
from stepembed.engine.errors import MetricUndefinedError

logger = logging.getLogger("stepembed.metrics")

BINARY_THRESHOLD = 0.5


def _binary_inputs(scores: Sequence[float], labels: Sequence[int], name: str):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricUndefinedError(f"{name}: {s.size} punteggi per {y.size} label")
    if s.size == 0:
        raise MetricUndefinedError(f"{name}: input vuoto")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricUndefinedError(f"{name}: label non binarie")
    if y.min() == y.max():
        raise MetricUndefinedError(f"{name}: una sola classe presente")
    if not np.all(np.isfinite(s)):
        raise MetricUndefinedError(f"{name}: punteggi non finiti")
    return s, y.astype(np.int64)


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AP = Σ_n (R_n − R_(n−1)) · P_n sulle soglie distinte in ordine decrescente."""
    s, y = _binary_inputs(scores, labels, "auprc")
    return float(average_precision_score(y, s))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg) + ½ P(pari)."""
    s, y = _binary_inputs(scores, labels, "auroc")
    return float(roc_auc_score(y, s))


def balanced_accuracy(pred_classes: Sequence[int], true_classes: Sequence[int]) -> float:
    pred = np.asarray(pred_classes).ravel()
    true = np.asarray(true_classes).ravel()
    if true.size == 0:
        raise MetricUndefinedError("balanced_accuracy: input vuoto")
    if pred.shape != true.shape:
        raise MetricUndefinedError(f"balanced_accuracy: {pred.size} predizioni per {true.size} label")
    # classi solo predette non contribuiscono (riga vuota nella matrice di confusione)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return float(balanced_accuracy_score(true, pred))


def mae_hours(pred: Sequence[float], true: Sequence[float], step_hours: float = 1.0,
              in_steps: bool = False) -> float:
    """Errore assoluto medio in ore; con in_steps=True gli input sono convertiti con step_hours."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(true, dtype=np.float64).ravel()
    if p.size == 0:
        raise MetricUndefinedError("mae_hours: input vuoto")
    if p.shape != t.shape:
        raise MetricUndefinedError(f"mae_hours: {p.size} predizioni per {t.size} valori")
    factor = step_hours if in_steps else 1.0
    return float(np.mean(np.abs(p - t)) * factor)


def los_bins(hours: Sequence[float], edges: Sequence[float] = LOS_BIN_EDGES_HOURS) -> np.ndarray:
    """Bucket di length-of-stay: bin i = numero di bordi ≤ valore."""
    return np.searchsorted(np.asarray(edges, dtype=np.float64), np.asarray(hours, dtype=np.float64),
                           side="right")


def cohen_kappa(pred_bins: Sequence[int], true_bins: Sequence[int], n_bins: int,
                weighting: str = "none") -> float:
    """κ = 1 − Σ w·O / Σ w·E; con weighting='none' coincide con (p_o − p_e) / (1 − p_e)."""
    if weighting not in ("none", "linear"):
        raise ValueError(f"Pesatura kappa sconosciuta: {weighting}")
    pred = np.asarray(pred_bins, dtype=np.int64).ravel()
    true = np.asarray(true_bins, dtype=np.int64).ravel()
    if true.size == 0 or pred.shape != true.shape:
        raise MetricUndefinedError("cohen_kappa: input vuoto o di lunghezza diversa")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= n_bins:
            raise MetricUndefinedError(f"cohen_kappa: bin fuori da [0, {n_bins})")
    observed = confusion_matrix(true, pred, labels=np.arange(n_bins)).astype(np.float64)
    observed /= observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    idx = np.arange(n_bins)
    if weighting == "linear":
        weights = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    else:
        weights = 1.0 - np.eye(n_bins)
    denom = float((weights * expected).sum())
    if denom <= 0.0:
        raise MetricUndefinedError("cohen_kappa: accordo casuale p_e == 1")
    return 1.0 - float((weights * observed).sum()) / denom


def _safe(name: str, fn, *args, **kwargs) -> float:
    try:
        return fn(*args, **kwargs)
    except MetricUndefinedError as e:
        logger.warning(f"⚠️ Metrica {name} non definita: {e}")
        return math.nan


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def task_metrics(task: str, outputs: np.ndarray, targets: np.ndarray, step_hours: float = 1.0,
                 los_edges: Optional[Sequence[float]] = None) -> Dict[str, float]:
    """
    Tutte le metriche applicabili al task su output e target già filtrati dalla maschera.
    binary: logit (n,), multiclass: logit (n, C), regression: ore (n,).
    """
    routing = TASK_ROUTING[task]
    targets = np.asarray(targets, dtype=np.float64)
    n = int(targets.shape[0])
    if n == 0:
        raise MetricUndefinedError(f"Nessun target valido per il task {task}")
    record: Dict[str, float] = {"n": float(n)}
    if routing["head_kind"] == "binary":
        probs = sigmoid(outputs)
        labels = targets.astype(np.int64)
        record["prevalence"] = float(labels.mean())
        record["auprc"] = _safe("auprc", auprc, probs, labels)
        record["auroc"] = _safe("auroc", auroc, probs, labels)
        record["balanced_accuracy"] = balanced_accuracy((probs >= BINARY_THRESHOLD).astype(np.int64), labels)
    elif routing["head_kind"] == "multiclass":
        labels = targets.astype(np.int64)
        record["balanced_accuracy"] = balanced_accuracy(np.argmax(outputs, axis=1), labels)
        record["cross_entropy"] = float(-np.mean(log_softmax(np.asarray(outputs))[np.arange(n), labels]))
    else:
        edges = LOS_BIN_EDGES_HOURS if los_edges is None else list(los_edges)
        pred_hours = np.asarray(outputs, dtype=np.float64)
        record["mae_hours"] = mae_hours(pred_hours, targets)
        record["kappa"] = _safe("kappa", cohen_kappa, los_bins(np.maximum(pred_hours, 0.0), edges),
                                los_bins(targets, edges), len(edges) + 1, "linear")
    return record
