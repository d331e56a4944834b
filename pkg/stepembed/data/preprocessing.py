# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Preprocessing dei time-series
Ordine fisso: forward_impute → fit_scaler (solo train) → apply_scaler.
- forward imputation entro il soggiorno (ultimo valore osservato)
- standard scaling su valori osservati di train, deviazione standard di popolazione
- celle senza osservazioni precedenti → 0 dopo lo scaling (imputazione a media)
Nessun clipping degli outlier.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Sequence

import numpy as np
import pandas as pd

from stepembed.data.datapipe import ScalerStats, Stay, TimeSeriesDataset
from stepembed.engine.errors import DataError

logger = logging.getLogger("stepembed.preprocessing")

MIN_STD = 1e-8


def forward_impute(stay: Stay) -> Stay:
    """Ogni cella mancante prende l'ultimo valore osservato della stessa feature; le altre restano pending."""
    filled = pd.DataFrame(stay.X).ffill().to_numpy(dtype=np.float64)
    pending = np.isnan(filled)
    return dataclasses.replace(stay, X=filled, pending=pending)


def fit_scaler(stays: Sequence[Stay]) -> ScalerStats:
    """Statistiche per feature sui soli valori osservati dei soggiorni di train."""
    if not stays:
        raise DataError("fit_scaler: split di train vuoto")
    X = np.concatenate([s.X for s in stays], axis=0)
    observed = np.concatenate([s.observed_mask for s in stays], axis=0)
    values = np.where(observed, X, np.nan)
    d = X.shape[1]
    mean = np.zeros(d)
    std = np.ones(d)
    counts = observed.sum(axis=0)
    for j in range(d):
        if counts[j] == 0:
            logger.warning(f"⚠️ Feature {j} mai osservata in train: media 0, std 1")
            continue
        col = values[observed[:, j], j]
        mean[j] = col.mean()
        s = col.std(ddof=0)
        std[j] = s if s >= MIN_STD else 1.0
    return ScalerStats(mean=mean, std=std)


def apply_scaler(stay: Stay, stats: ScalerStats) -> Stay:
    """x' = (x − mean) / std; le celle pending diventano esattamente 0."""
    if stay.scaled:
        return stay
    if stats.mean.shape[0] != stay.X.shape[1]:
        raise DataError(f"apply_scaler: {stats.mean.shape[0]} statistiche per {stay.X.shape[1]} feature")
    scaled = (stay.X - stats.mean) / stats.std
    pending = np.isnan(scaled) if stay.pending is None else (stay.pending | np.isnan(scaled))
    scaled[pending] = 0.0
    return dataclasses.replace(stay, X=scaled, pending=np.zeros_like(pending), scaled=True)


def preprocess_dataset(dataset: TimeSeriesDataset) -> TimeSeriesDataset:
    """Pipeline completa; su un dataset già processato è l'identità."""
    if dataset.scaler is not None and all(s.scaled for s in dataset.stays):
        return dataset
    imputed = [forward_impute(s) for s in dataset.stays]
    stats = fit_scaler([s for s in imputed if s.split == "train"])
    stays = [apply_scaler(s, stats) for s in imputed]
    logger.info(f"🧹 Preprocessing completato: {len(stays)} soggiorni, {len(dataset.feature_names)} feature")
    return dataclasses.replace(dataset, stays=stays, scaler=stats)


def apply_preprocessing(dataset: TimeSeriesDataset, stats: ScalerStats) -> TimeSeriesDataset:
    """Imputazione + scaling con statistiche già stimate (es. lette da un checkpoint)."""
    stays = [apply_scaler(forward_impute(s), stats) if not s.scaled else s for s in dataset.stays]
    return dataclasses.replace(dataset, stays=stays, scaler=stats)
