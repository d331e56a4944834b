# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED - Registri di default
Valori di default per tipo di encoder / aggregatore / backbone, training e task.
"""

from typing import Any, Dict, Optional


# === ENCODER STEP-WISE ===

ENCODER_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "none": {
        "name": "Nessun embedding (backbone su feature grezze)",
        "depth": 1,
        "hidden_dim": 32,
    },
    "linear": {
        "name": "Embedding lineare",
        "depth": 1,
        "hidden_dim": 32,
    },
    "mlp": {
        "name": "MLP",
        "depth": 3,
        "hidden_dim": 32,
        "dropout": 0.0,
    },
    "resnet": {
        "name": "ResNet",
        "depth": 2,
        "hidden_dim": 32,
        "dropout": 0.0,
    },
    "ftt": {
        "name": "Feature Tokenizer Transformer",
        "depth": 1,
        "hidden_dim": 32,
        "token_dim": 64,
        "heads": 2,
        "dropout": 0.0,
        "attention_dropout": 0.0,
    },
}

# Dimensione dell'embedding per time-step (latent dim)
EMBEDDING_DIM = 32


# === AGGREGAZIONE DEI GRUPPI ===

AGGREGATOR_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "mean": {"name": "Media"},
    "sum": {"name": "Somma"},
    "concat": {"name": "Concatenazione", "max_concat_dim": 4096},
    "attention": {"name": "Attention pooling [CLS]", "agg_depth": 2, "agg_heads": 2},
}


# === BACKBONE SEQUENZIALI ===

BACKBONE_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "gru": {
        "name": "Gated Recurrent Unit",
        "hidden_dim": 64,
        "depth": 1,
        "dropout": 0.4,
    },
    "transformer": {
        "name": "Transformer causale",
        "hidden_dim": 64,
        "depth": 1,
        "heads": 1,
        "dropout": 0.4,
        "attention_dropout": 0.3,
    },
    "tcn": {
        "name": "Temporal Convolutional Network",
        "hidden_dim": 64,
        "depth": None,  # scelta in base a T (copertura del campo recettivo)
        "kernel_size": 2,
        "dilation_base": 2,
        "dropout": 0.4,
    },
}


# === TRAINING ===

TRAIN_DEFAULTS: Dict[str, Any] = {
    "learning_rate": 1e-4,
    "batch_size": 32,
    "max_epochs": 100,
    "patience": 10,
    "min_delta": 1e-6,
    "l1_weight": 1e-3,
    "grad_clip": 1.0,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
}


# === TASK ===

TASK_ROUTING: Dict[str, Dict[str, Any]] = {
    "online_binary": {"head_kind": "binary", "prediction_mode": "per_step", "primary_metric": "auprc"},
    "per_stay_binary": {"head_kind": "binary", "prediction_mode": "per_stay", "primary_metric": "auprc"},
    "multiclass": {"head_kind": "multiclass", "prediction_mode": "per_stay", "primary_metric": "balanced_accuracy"},
    "regression": {"head_kind": "regression", "prediction_mode": "per_step", "primary_metric": "mae_hours"},
}

# Bucket length-of-stay (ore): 10 classi, <1g, 1..8 giorni, 8-14 giorni, >14 giorni
LOS_BIN_EDGES_HOURS = [24.0, 48.0, 72.0, 96.0, 120.0, 144.0, 168.0, 192.0, 336.0]


def encoder_default(kind: str, key: str, value: Optional[Any] = None) -> Any:
    """Valore esplicito se presente, altrimenti default del registro."""
    if value is not None:
        return value
    return ENCODER_DEFAULTS.get(kind, {}).get(key, ENCODER_DEFAULTS["ftt"].get(key))


def backbone_default(kind: str, key: str, value: Optional[Any] = None) -> Any:
    if value is not None:
        return value
    return BACKBONE_DEFAULTS.get(kind, {}).get(key, BACKBONE_DEFAULTS["transformer"].get(key))


def aggregator_default(method: str, key: str, value: Optional[Any] = None) -> Any:
    if value is not None:
        return value
    return AGGREGATOR_DEFAULTS.get(method, {}).get(key, AGGREGATOR_DEFAULTS["attention"].get(key))
