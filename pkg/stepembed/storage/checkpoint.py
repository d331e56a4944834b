# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Checkpoint
Documento JSON versionato (chiavi ordinate, nessun timestamp → byte-stabile):
  format_version, model_config, train_config, params{nome: shape, dtype, data base64 LE},
  scaler, feature_names, task, step_hours, best_epoch
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import numpy as np
from pydantic import ValidationError

from stepembed.data.datapipe import ScalerStats
from stepembed.engine.diffcore import parameter
from stepembed.engine.errors import DataError
from stepembed.engine.layers import Params
from stepembed.models.schemas import ModelConfig, TrainConfig

logger = logging.getLogger("stepembed.checkpoint")

FORMAT_VERSION = 1
PARAM_DTYPE = "float64"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: Params
    scaler: Optional[ScalerStats]
    feature_names: List[str]
    task: str
    step_hours: float
    best_epoch: int
    checkpoint_id: str = ""


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    data = np.ascontiguousarray(array, dtype="<f8")
    return {"shape": list(data.shape), "dtype": PARAM_DTYPE,
            "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_array(payload: Mapping[str, Any]) -> np.ndarray:
    if payload.get("dtype") != PARAM_DTYPE:
        raise DataError(f"Checkpoint: dtype non supportato {payload.get('dtype')}")
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(payload["shape"]).astype(np.float64)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    document = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.model_dump(mode="json"),
        "train_config": ckpt.train_config.model_dump(mode="json"),
        "params": {name: encode_array(t.data) for name, t in sorted(ckpt.params.items())},
        "scaler": ckpt.scaler.to_dict() if ckpt.scaler is not None else None,
        "feature_names": list(ckpt.feature_names),
        "task": ckpt.task,
        "step_hours": ckpt.step_hours,
        "best_epoch": ckpt.best_epoch,
    }
    return json.dumps(document, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = checkpoint_bytes(ckpt)
    path.write_bytes(payload)
    ckpt.checkpoint_id = hashlib.sha256(payload).hexdigest()[:12]
    logger.info(f"💾 Checkpoint salvato: {path} ({len(payload)} byte, id {ckpt.checkpoint_id})")
    return path


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint non trovato: {path}")
    payload = path.read_bytes()
    try:
        document = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"Checkpoint illeggibile ({path}): {e}") from None
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"Checkpoint {path}: format_version {version} non supportata")
    try:
        model_config = ModelConfig.model_validate(document["model_config"])
        train_config = TrainConfig.model_validate(document["train_config"])
    except (KeyError, ValidationError) as e:
        raise DataError(f"Checkpoint {path}: configurazione non valida ({e})") from None
    params: Params = {name: parameter(decode_array(p), name=name) for name, p in document["params"].items()}
    scaler = ScalerStats.from_dict(document["scaler"]) if document.get("scaler") else None
    return Checkpoint(model_config=model_config, train_config=train_config, params=params, scaler=scaler,
                      feature_names=list(document["feature_names"]), task=document["task"],
                      step_hours=float(document["step_hours"]), best_epoch=int(document["best_epoch"]),
                      checkpoint_id=hashlib.sha256(payload).hexdigest()[:12])
