# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Data pipeline
Caricamento dei CSV (dati, label, split, gruppi), dataset in memoria e batching.

Formati (UTF-8, separatore virgola, decimale '.'):
  data.csv    stay_id,time,<feature...>   cella vuota = mancante
  labels.csv  stay_id,time,label          (task online: online_binary, regression)
              stay_id,label               (task per soggiorno: per_stay_binary, multiclass)
  splits.csv  stay_id,split               split ∈ {train, val, test}
  groups.csv  feature,group
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from stepembed.config.defaults import TASK_ROUTING
from stepembed.embedding.grouping import scheme_from_assignments
from stepembed.engine.errors import ConfigError, DataError, PartitionError
from stepembed.models.schemas import GroupingScheme

logger = logging.getLogger("stepembed.datapipe")

SPLITS = ("train", "val", "test")

DATA_FILE = "data.csv"
LABELS_FILE = "labels.csv"
SPLITS_FILE = "splits.csv"
GROUPS_FILE = "groups.csv"

CSV_FLOAT_FORMAT = "%.10g"


# ============================================================
# DATACLASS
# ============================================================

@dataclass
class Stay:
    """Un soggiorno: serie T×d + maschere + label."""
    stay_id: str
    X: np.ndarray                     # (T, d), NaN = non osservato
    observed_mask: np.ndarray         # (T, d) misura grezza presente
    labels: np.ndarray                # (T,) per step | (1,) per soggiorno
    label_mask: np.ndarray            # stessa forma di labels
    split: str = "train"
    per_stay: bool = False
    pending: Optional[np.ndarray] = None   # (T, d) celle in attesa di imputazione a media
    scaled: bool = False

    @property
    def T(self) -> int:
        return int(self.X.shape[0])


@dataclass
class ScalerStats:
    """Media e deviazione standard per feature (solo valori osservati di train)."""
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ScalerStats":
        return cls(mean=np.asarray(data["mean"], dtype=np.float64),
                   std=np.asarray(data["std"], dtype=np.float64))


@dataclass
class TimeSeriesDataset:
    stays: List[Stay]
    feature_names: List[str]
    task: str = "online_binary"
    grouping: Optional[GroupingScheme] = None
    step_hours: float = 1.0
    scaler: Optional[ScalerStats] = None
    schemes: Dict[str, GroupingScheme] = field(default_factory=dict)

    def __post_init__(self):
        if self.step_hours <= 0:
            raise DataError(f"step_hours deve essere > 0, ricevuto {self.step_hours}")
        d = len(self.feature_names)
        for stay in self.stays:
            if stay.X.ndim != 2 or stay.X.shape[1] != d:
                raise DataError(f"Soggiorno {stay.stay_id}: forma {stay.X.shape}, attese {d} feature")
            if stay.T < 1:
                raise DataError(f"Soggiorno {stay.stay_id}: serie vuota")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def per_stay(self) -> bool:
        return TASK_ROUTING[self.task]["prediction_mode"] == "per_stay"

    def split(self, name: str) -> List[Stay]:
        if name not in SPLITS:
            raise DataError(f"Split sconosciuto: {name}")
        return [s for s in self.stays if s.split == name]

    def by_id(self, stay_ids: Sequence[str]) -> List[Stay]:
        index = {s.stay_id: s for s in self.stays}
        unknown = [i for i in stay_ids if i not in index]
        if unknown:
            raise DataError(f"Soggiorni sconosciuti: {unknown}")
        return [index[i] for i in stay_ids]


def make_stay(stay_id: str, X: np.ndarray, labels: np.ndarray, label_mask: np.ndarray,
              split: str, per_stay: bool, observed_mask: Optional[np.ndarray] = None) -> Stay:
    X = np.asarray(X, dtype=np.float64)
    mask = ~np.isnan(X) if observed_mask is None else np.asarray(observed_mask, dtype=bool)
    return Stay(stay_id=str(stay_id), X=X, observed_mask=mask,
                labels=np.asarray(labels, dtype=np.float64), label_mask=np.asarray(label_mask, dtype=bool),
                split=split, per_stay=per_stay)


# ============================================================
# CARICAMENTO
# ============================================================

def _read_csv(path: os.PathLike, required: Sequence[str], kind: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"File {kind} non trovato: {path}")
    try:
        df = pd.read_csv(path, dtype={"stay_id": str}, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"File {kind} illeggibile ({path}): {e}") from None
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"File {kind} ({path}): colonne mancanti {missing}")
    return df


def _check_time_column(df: pd.DataFrame, kind: str) -> None:
    time = pd.to_numeric(df["time"], errors="coerce")
    if time.isna().any() or (time < 0).any() or (time != np.floor(time)).any():
        raise DataError(f"File {kind}: 'time' deve essere un indice di step intero non negativo")
    df["time"] = time.astype(np.int64)


def load_grouping(groups_csv: os.PathLike, feature_names: Sequence[str]) -> GroupingScheme:
    """Schema di raggruppamento da un CSV feature,group (una riga per feature)."""
    df = _read_csv(groups_csv, ("feature", "group"), "gruppi")
    df["feature"] = df["feature"].astype(str)
    df["group"] = df["group"].astype(str)
    dup = df["feature"][df["feature"].duplicated()].tolist()
    if dup:
        position = {f: i for i, f in enumerate(feature_names)}
        raise PartitionError(f"Feature assegnate a più gruppi: {dup}",
                             duplicated=[position.get(f, f) for f in dup])
    assignments = dict(zip(df["feature"], df["group"]))
    return scheme_from_assignments(Path(groups_csv).stem, feature_names, assignments)


def load_dataset(data_csv: os.PathLike, labels_csv: os.PathLike, splits_csv: os.PathLike,
                 groups_csv: Optional[os.PathLike] = None, step_hours: float = 1.0,
                 task: str = "online_binary") -> TimeSeriesDataset:
    """
    Righe raggruppate per stay_id e ordinate per tempo; la griglia di ogni soggiorno
    va da 0 al massimo `time` osservato (righe assenti = step interamente mancanti).
    """
    if task not in TASK_ROUTING:
        raise ConfigError(f"Task sconosciuto: {task}")
    per_stay = TASK_ROUTING[task]["prediction_mode"] == "per_stay"

    data = _read_csv(data_csv, ("stay_id", "time"), "dati")
    feature_names = [c for c in data.columns if c not in ("stay_id", "time")]
    if not feature_names:
        raise DataError(f"File dati ({data_csv}): nessuna colonna di feature")
    _check_time_column(data, "dati")
    dup = data.duplicated(subset=["stay_id", "time"])
    if dup.any():
        first = data.loc[dup, ["stay_id", "time"]].iloc[0]
        raise DataError(f"Riga duplicata (stay_id={first['stay_id']}, time={first['time']})")
    try:
        values = data[feature_names].apply(pd.to_numeric, errors="raise").astype(np.float64)
    except (ValueError, TypeError) as e:
        raise DataError(f"File dati: valore non numerico ({e})") from None
    data[feature_names] = values

    splits = _read_csv(splits_csv, ("stay_id", "split"), "split")
    bad = sorted(set(splits["split"]) - set(SPLITS))
    if bad:
        raise DataError(f"Split non validi: {bad}")
    if splits["stay_id"].duplicated().any():
        raise DataError("File split: stay_id duplicati")
    split_of = dict(zip(splits["stay_id"], splits["split"]))

    label_cols = ("stay_id", "label") if per_stay else ("stay_id", "time", "label")
    labels = _read_csv(labels_csv, label_cols, "label")
    if not per_stay:
        _check_time_column(labels, "label")
    labels["label"] = pd.to_numeric(labels["label"], errors="coerce")

    stay_ids = list(dict.fromkeys(data["stay_id"]))
    unknown = sorted(set(labels["stay_id"]) - set(stay_ids))
    if unknown:
        raise DataError(f"Label per soggiorni assenti dai dati: {unknown[:5]}")
    no_split = [s for s in stay_ids if s not in split_of]
    if no_split:
        raise DataError(f"Soggiorni senza split: {no_split[:5]}")

    label_groups = {sid: g for sid, g in labels.groupby("stay_id", sort=False)}
    stays: List[Stay] = []
    for sid, rows in data.groupby("stay_id", sort=False):
        if not rows["time"].is_monotonic_increasing:
            raise DataError(f"Soggiorno {sid}: tempo non monotono")
        T = int(rows["time"].max()) + 1
        X = np.full((T, len(feature_names)), np.nan)
        X[rows["time"].to_numpy()] = rows[feature_names].to_numpy()
        lab = label_groups.get(sid)
        if lab is None:
            raise DataError(f"Soggiorno {sid} senza label")
        if per_stay:
            if len(lab) != 1:
                raise DataError(f"Soggiorno {sid}: attesa una sola label, trovate {len(lab)}")
            y = lab["label"].to_numpy(dtype=np.float64)
            y_mask = ~np.isnan(y)
        else:
            if (lab["time"] >= T).any():
                raise DataError(f"Soggiorno {sid}: label oltre l'ultimo step ({T - 1})")
            if lab["time"].duplicated().any():
                raise DataError(f"Soggiorno {sid}: label duplicate per lo stesso step")
            y = np.full(T, np.nan)
            y[lab["time"].to_numpy()] = lab["label"].to_numpy(dtype=np.float64)
            y_mask = ~np.isnan(y)
        stays.append(make_stay(sid, X, np.nan_to_num(y), y_mask, split_of[sid], per_stay))

    grouping = load_grouping(groups_csv, feature_names) if groups_csv else None
    logger.info(f"📂 Dataset caricato: {len(stays)} soggiorni, {len(feature_names)} feature, task={task}")
    return TimeSeriesDataset(stays=stays, feature_names=feature_names, task=task,
                             grouping=grouping, step_hours=step_hours)


def save_dataset(dataset: TimeSeriesDataset, out_dir: os.PathLike) -> Dict[str, Path]:
    """Scrive i quattro CSV + uno schema di gruppi per ogni schema noto (byte-stabile)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, label_rows, split_rows = [], [], []
    for stay in dataset.stays:
        df = pd.DataFrame(stay.X, columns=dataset.feature_names)
        df.insert(0, "time", np.arange(stay.T))
        df.insert(0, "stay_id", stay.stay_id)
        frames.append(df)
        if dataset.per_stay:
            if stay.label_mask[0]:
                label_rows.append({"stay_id": stay.stay_id, "label": stay.labels[0]})
        else:
            for t in np.flatnonzero(stay.label_mask):
                label_rows.append({"stay_id": stay.stay_id, "time": int(t), "label": stay.labels[t]})
        split_rows.append({"stay_id": stay.stay_id, "split": stay.split})

    paths = {"data": out / DATA_FILE, "labels": out / LABELS_FILE, "splits": out / SPLITS_FILE}
    pd.concat(frames, ignore_index=True).to_csv(paths["data"], index=False, na_rep="",
                                                float_format=CSV_FLOAT_FORMAT)
    label_cols = ["stay_id", "label"] if dataset.per_stay else ["stay_id", "time", "label"]
    pd.DataFrame(label_rows, columns=label_cols).to_csv(paths["labels"], index=False,
                                                        float_format=CSV_FLOAT_FORMAT)
    pd.DataFrame(split_rows, columns=["stay_id", "split"]).to_csv(paths["splits"], index=False)

    schemes = dict(dataset.schemes)
    if dataset.grouping is not None:
        schemes.setdefault("true", dataset.grouping)
    for name, scheme in schemes.items():
        rows = [{"feature": dataset.feature_names[i], "group": g.name}
                for g in scheme.groups for i in g.indices]
        path = out / (GROUPS_FILE if name == "true" else f"groups_{name}.csv")
        pd.DataFrame(rows, columns=["feature", "group"]).to_csv(path, index=False)
        paths[f"groups_{name}"] = path
    logger.info(f"💾 Dataset scritto in {out}")
    return paths


# ============================================================
# BATCHING
# ============================================================

@dataclass
class Batch:
    X: np.ndarray             # (B, T_max, d), padding = 0
    step_mask: np.ndarray     # (B, T_max) True sugli step reali
    labels: np.ndarray        # (B, T_max) | (B,)
    label_mask: np.ndarray    # stessa forma di labels, False su padding
    stay_ids: List[str]
    lengths: np.ndarray       # (B,)

    @property
    def size(self) -> int:
        return len(self.stay_ids)


def collate(stays: Sequence[Stay], per_stay: bool) -> Batch:
    """Padding in coda fino al T massimo del batch."""
    t_max = max(s.T for s in stays)
    d = stays[0].X.shape[1]
    b = len(stays)
    X = np.zeros((b, t_max, d))
    step_mask = np.zeros((b, t_max), dtype=bool)
    if per_stay:
        labels = np.zeros(b)
        label_mask = np.zeros(b, dtype=bool)
    else:
        labels = np.zeros((b, t_max))
        label_mask = np.zeros((b, t_max), dtype=bool)
    for i, s in enumerate(stays):
        X[i, : s.T] = s.X
        step_mask[i, : s.T] = True
        if per_stay:
            labels[i] = s.labels[0]
            label_mask[i] = s.label_mask[0]
        else:
            labels[i, : s.T] = s.labels
            label_mask[i, : s.T] = s.label_mask
    return Batch(X=X, step_mask=step_mask, labels=labels, label_mask=label_mask,
                 stay_ids=[s.stay_id for s in stays], lengths=np.array([s.T for s in stays]))


def make_batches(dataset: TimeSeriesDataset, split: str, batch_size: int,
                 seed: Optional[int] = None) -> List[Batch]:
    """Batch con padding; ordine mescolato in modo deterministico se seed è dato."""
    if batch_size < 1:
        raise ConfigError(f"batch_size deve essere >= 1, ricevuto {batch_size}")
    stays = dataset.split(split)
    if not stays:
        raise DataError(f"Split '{split}' vuoto")
    order = np.arange(len(stays)) if seed is None else np.random.default_rng(seed).permutation(len(stays))
    ordered = [stays[i] for i in order]
    return [collate(ordered[i: i + batch_size], dataset.per_stay)
            for i in range(0, len(ordered), batch_size)]
