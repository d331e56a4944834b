# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Generatore sintetico a gruppi
Sostituto desk-scale dei dataset ICU: K gruppi di feature, ognuno letto da uno stato latente AR(1).

- feature del gruppo k: letture rumorose affini o quadratiche di z_k(t)
- segnale: Σ_k c_k · x_(k,0) · x_(k,1) (prodotto di due feature dello stesso gruppo)
- label online: 1{σ(segnale) > soglia}, soglia cercata per bisezione (prevalenza ~10%)
- mancanti i.i.d. con probabilità missing_rate
Deterministico dato il seed.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from stepembed.config.defaults import TASK_ROUTING
from stepembed.data.datapipe import TimeSeriesDataset, make_stay
from stepembed.embedding.grouping import single_group_scheme
from stepembed.engine.errors import ConfigError, NumericError
from stepembed.models.schemas import FeatureGroup, GroupingScheme

logger = logging.getLogger("stepembed.synthetic")

TARGET_PREVALENCE = 0.10
PREVALENCE_RANGE = (0.05, 0.15)
BISECTION_STEPS = 80
READOUT_NOISE = 0.1
SPLIT_FRACTIONS = (0.70, 0.15)


def feature_names_for(K: int, feats_per_group: int) -> List[str]:
    return [f"g{k}_f{j}" for k in range(K) for j in range(feats_per_group)]


def true_scheme(K: int, feats_per_group: int) -> GroupingScheme:
    """Gruppi contigui: il gruppo k contiene le feature g{k}_f*."""
    return GroupingScheme(name="true", groups=[
        FeatureGroup(name=f"g{k}", indices=list(range(k * feats_per_group, (k + 1) * feats_per_group)))
        for k in range(K)])


def interleaved_scheme(K: int, feats_per_group: int) -> GroupingScheme:
    """Assegnazione round-robin: rompe la struttura latente dei gruppi."""
    d = K * feats_per_group
    return GroupingScheme(name="interleaved", groups=[
        FeatureGroup(name=f"mix{r}", indices=[i for i in range(d) if i % K == r]) for r in range(K)])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def calibrate_threshold(probs: np.ndarray, target: float = TARGET_PREVALENCE,
                        bounds: Tuple[float, float] = PREVALENCE_RANGE) -> float:
    """Bisezione sulla soglia θ ∈ (0, 1) per prevalenza(θ) = mean(probs > θ) ≈ target."""
    lo, hi = 0.0, 1.0
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if np.mean(probs > mid) > target:
            lo = mid
        else:
            hi = mid
    # prevalenza(lo) > target ≥ prevalenza(hi): si sceglie il lato più vicino
    best = min((lo, hi), key=lambda th: abs(np.mean(probs > th) - target))
    prevalence = float(np.mean(probs > best))
    if not bounds[0] <= prevalence <= bounds[1]:
        raise NumericError(
            f"Calibrazione della prevalenza impossibile: {prevalence:.3f} fuori da {list(bounds)}")
    return best


def _assign_splits(rng: np.random.Generator, n: int) -> List[str]:
    order = rng.permutation(n)
    n_train = max(1, int(round(SPLIT_FRACTIONS[0] * n)))
    n_val = max(1, int(round(SPLIT_FRACTIONS[1] * n)))
    n_train = min(n_train, n - 2)
    splits = ["test"] * n
    for rank, i in enumerate(order):
        if rank < n_train:
            splits[i] = "train"
        elif rank < n_train + n_val:
            splits[i] = "val"
    return splits


def generate_synthetic(seed: int = 0, n_stays: int = 200, T: int = 32, K: int = 4,
                       feats_per_group: int = 6, missing_rate: float = 0.3,
                       task: str = "online_binary", min_T: Optional[int] = None,
                       signal_groups: Optional[Sequence[int]] = None,
                       step_hours: float = 1.0) -> Tuple[TimeSeriesDataset, GroupingScheme]:
    """
    Dataset sintetico + schema di raggruppamento vero.
    Task: online_binary | per_stay_binary | multiclass (C = K) | regression (LoS residua in ore).
    """
    if task not in TASK_ROUTING:
        raise ConfigError(f"Task sconosciuto: {task}")
    if n_stays < 3 or T < 1 or K < 1 or feats_per_group < 2:
        raise ConfigError("generate_synthetic: n_stays >= 3, T >= 1, K >= 1, feats_per_group >= 2")
    if not 0.0 <= missing_rate < 1.0:
        raise ConfigError(f"missing_rate deve stare in [0, 1), ricevuto {missing_rate}")
    min_T = max(1, T // 2) if min_T is None else min_T
    if not 1 <= min_T <= T:
        raise ConfigError(f"min_T deve stare in [1, T], ricevuto {min_T}")
    active = list(range(K)) if signal_groups is None else sorted(set(signal_groups))
    if any(k < 0 or k >= K for k in active):
        raise ConfigError(f"signal_groups fuori da [0, {K}): {active}")

    rng = np.random.default_rng(seed)
    d = K * feats_per_group
    phi = rng.uniform(0.7, 0.95, size=K)
    slope = rng.uniform(0.5, 1.5, size=(K, feats_per_group)) * rng.choice([-1.0, 1.0], size=(K, feats_per_group))
    offset = rng.normal(0.0, 1.0, size=(K, feats_per_group))
    quadratic = np.zeros((K, feats_per_group), dtype=bool)
    quadratic[:, 1::2] = True
    coef = rng.uniform(1.0, 2.0, size=K) * rng.choice([-1.0, 1.0], size=K)
    mask_signal = np.zeros(K)
    mask_signal[active] = 1.0
    coef = coef * mask_signal

    # --- serie latenti e letture (lunghezza piena T) ---
    series, terms = [], []
    for _ in range(n_stays):
        z = np.zeros((T, K))
        z[0] = rng.normal(size=K)
        noise = rng.normal(size=(T, K)) * np.sqrt(1.0 - phi ** 2)
        for t in range(1, T):
            z[t] = phi * z[t - 1] + noise[t]
        readout = np.where(quadratic[None], z[:, :, None] ** 2 - 1.0, z[:, :, None])
        x = slope[None] * readout + offset[None] + READOUT_NOISE * rng.normal(size=(T, K, feats_per_group))
        terms.append(coef[None] * x[:, :, 0] * x[:, :, 1])          # (T, K)
        series.append(x.reshape(T, d))

    # --- lunghezze ---
    if task == "regression":
        early = np.array([tm[:min_T].sum(axis=1).mean() for tm in terms])
        spread = early.std() if early.std() > 0 else 1.0
        lengths = min_T + np.rint((T - min_T) * _sigmoid((early - early.mean()) / spread)).astype(int)
    else:
        lengths = rng.integers(min_T, T + 1, size=n_stays)

    # --- label ---
    per_stay = TASK_ROUTING[task]["prediction_mode"] == "per_stay"
    labels: List[np.ndarray] = []
    if task == "online_binary":
        probs = [_sigmoid(tm[:L].sum(axis=1)) for tm, L in zip(terms, lengths)]
        theta = calibrate_threshold(np.concatenate(probs))
        labels = [(p > theta).astype(np.float64) for p in probs]
    elif task == "per_stay_binary":
        probs = np.array([_sigmoid(tm[:L].sum(axis=1)).max() for tm, L in zip(terms, lengths)])
        theta = calibrate_threshold(probs)
        labels = [np.array([float(p > theta)]) for p in probs]
    elif task == "multiclass":
        labels = [np.array([float(np.argmax(np.abs(tm[:L]).mean(axis=0)))]) for tm, L in zip(terms, lengths)]
    else:
        labels = [(L - np.arange(L)) * step_hours for L in lengths]

    # --- mancanti + split ---
    splits = _assign_splits(rng, n_stays)
    stays = []
    for i in range(n_stays):
        L = int(lengths[i])
        X = series[i][:L].copy()
        observed = rng.random((L, d)) >= missing_rate
        X[~observed] = np.nan
        y = labels[i].astype(np.float64)
        stays.append(make_stay(f"s{i:05d}", X, y, np.ones_like(y, dtype=bool), splits[i], per_stay,
                               observed_mask=observed))

    scheme = true_scheme(K, feats_per_group)
    dataset = TimeSeriesDataset(
        stays=stays, feature_names=feature_names_for(K, feats_per_group), task=task,
        grouping=scheme, step_hours=step_hours,
        schemes={"true": scheme, "interleaved": interleaved_scheme(K, feats_per_group),
                 "none": single_group_scheme(d)})
    if task in ("online_binary", "per_stay_binary"):
        prevalence = float(np.mean(np.concatenate([s.labels for s in stays])))
        logger.info(f"🧪 Dataset sintetico: {n_stays} soggiorni, d={d}, K={K}, prevalenza={prevalence:.3f}")
    else:
        logger.info(f"🧪 Dataset sintetico: {n_stays} soggiorni, d={d}, K={K}, task={task}")
    return dataset, scheme


def label_prevalence(dataset: TimeSeriesDataset) -> float:
    """Frazione di label positive fra quelle valide."""
    values = np.concatenate([s.labels[s.label_mask] for s in dataset.stays])
    return float(values.mean()) if values.size else float("nan")
