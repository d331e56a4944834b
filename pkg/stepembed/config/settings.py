# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Configurazione
- percorsi e override da ambiente (.env caricato con python-dotenv)
- parser del file di esperimento INI: [data] [model] [train] [output]
- costruzione di ModelConfig / TrainConfig dai registri di default
"""

import configparser
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from stepembed.config.defaults import (
    AGGREGATOR_DEFAULTS, EMBEDDING_DIM, TASK_ROUTING, TRAIN_DEFAULTS,
    aggregator_default, backbone_default, encoder_default,
)
from stepembed.engine.errors import ConfigError
from stepembed.models.schemas import (
    AggregatorSpec, BackboneSpec, DataSection, EncoderSpec, ExperimentConfig, GroupingScheme,
    ModelConfig, ModelSection, OutputSection, TrainConfig, TrainSection,
)
from stepembed.sequence.backbones import receptive_field, tcn_depth_for

load_dotenv()

logger = logging.getLogger("stepembed.settings")

# ============================================================
# CONFIGURAZIONE PATHS
# ============================================================

PROJECT_DIR = Path(__file__).resolve().parent.parent.parent


def data_dir() -> Path:
    return Path(os.environ.get("STEPEMBED_DATA_DIR", str(PROJECT_DIR / "data")))


def log_dir() -> Path:
    return Path(os.environ.get("STEPEMBED_LOG_DIR", str(data_dir() / "logs")))


def max_workers() -> int:
    """Processi per le sweep parallele (STEPEMBED_WORKERS, default CPU − 1, minimo 1)."""
    raw = os.environ.get("STEPEMBED_WORKERS", "")
    if raw.strip():
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"STEPEMBED_WORKERS non intero: {raw!r}") from None
        if value < 1:
            raise ConfigError(f"STEPEMBED_WORKERS deve essere >= 1, ricevuto {value}")
        return value
    return max(1, (os.cpu_count() or 2) - 1)


# ============================================================
# FILE DI ESPERIMENTO
# ============================================================

SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "output": OutputSection,
}


def _format_validation(section: str, error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(x) for x in item.get("loc", ()))
        parts.append(f"[{section}] {loc}: {item.get('msg')}")
    return "; ".join(parts)


def parse_experiment(text: str, source: str = "<config>") -> ExperimentConfig:
    """INI key = value → ExperimentConfig; sezioni o chiavi sconosciute → ConfigError."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: file di configurazione non valido ({e})") from None

    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: sezioni sconosciute {unknown}")
    if not parser.has_section("data"):
        raise ConfigError(f"{source}: sezione [data] mancante")

    sections: Dict[str, Any] = {}
    for name, model in SECTIONS.items():
        if not parser.has_section(name):
            continue
        raw = {k: v for k, v in parser.items(name) if v != ""}
        try:
            sections[name] = model.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(f"{source}: {_format_validation(name, e)}") from None
    return ExperimentConfig(**sections)


def load_experiment(path: os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"File di configurazione non trovato: {path}")
    return parse_experiment(path.read_text(encoding="utf-8"), source=str(path))


def override(config: ExperimentConfig, section: str, **values: Any) -> ExperimentConfig:
    """Copia validata con alcune chiavi di una sezione sostituite."""
    current = getattr(config, section).model_dump()
    current.update({k: v for k, v in values.items()})
    try:
        updated = SECTIONS[section].model_validate(current)
    except ValidationError as e:
        raise ConfigError(_format_validation(section, e)) from None
    return config.model_copy(update={section: updated})


# ============================================================
# COSTRUZIONE DELLE SPECIFICHE
# ============================================================

def build_model_config(section: ModelSection, n_features: int, task: str, T: int,
                       grouping: Optional[GroupingScheme], n_classes: int = 1) -> ModelConfig:
    """ModelSection (campi None = default del registro) → ModelConfig validato."""
    kind = section.encoder
    routing = TASK_ROUTING[task]
    try:
        emb_dim = section.embedding_dim or EMBEDDING_DIM
        encoder = EncoderSpec(
            kind=kind,
            input_dim=n_features,
            output_dim=n_features if kind == "none" else emb_dim,
            depth=encoder_default(kind, "depth", section.encoder_depth),
            hidden_dim=encoder_default(kind, "hidden_dim", section.encoder_hidden),
            token_dim=encoder_default(kind, "token_dim", section.token_dim),
            heads=encoder_default(kind, "heads", section.encoder_heads),
            dropout=encoder_default(kind, "dropout", section.encoder_dropout) or 0.0,
            attention_dropout=encoder_default(kind, "attention_dropout", section.encoder_attention_dropout) or 0.0,
        )
        aggregator = None
        if grouping is not None:
            method = section.aggregation
            aggregator = AggregatorSpec(
                method=method,
                group_dim=encoder.output_dim,
                n_groups=grouping.n_groups,
                output_dim=emb_dim,
                agg_depth=aggregator_default(method, "agg_depth", section.agg_depth),
                agg_heads=aggregator_default(method, "agg_heads", section.agg_heads),
                dropout=encoder.dropout,
                attention_dropout=encoder.attention_dropout,
                max_concat_dim=AGGREGATOR_DEFAULTS["concat"]["max_concat_dim"],
            )
        bb = section.backbone
        kernel = backbone_default(bb, "kernel_size", section.kernel_size) or 2
        base = backbone_default(bb, "dilation_base", section.dilation_base) or 2
        depth = section.backbone_depth or backbone_default(bb, "depth")
        if depth is None:
            depth = tcn_depth_for(T, kernel, base)
            logger.info(f"🧱 TCN: profondità {depth}, campo recettivo "
                        f"{receptive_field(kernel, base, depth)} per T={T}")
        backbone = BackboneSpec(
            kind=bb,
            input_dim=aggregator.output_dim if aggregator is not None else encoder.output_dim,
            hidden_dim=backbone_default(bb, "hidden_dim", section.backbone_hidden),
            depth=depth,
            heads=backbone_default(bb, "heads", section.backbone_heads) or 1,
            kernel_size=kernel,
            dilation_base=base,
            dropout=backbone_default(bb, "dropout", section.backbone_dropout) or 0.0,
            attention_dropout=backbone_default(bb, "attention_dropout", section.backbone_attention_dropout) or 0.0,
            head_kind=routing["head_kind"],
            n_classes=n_classes if routing["head_kind"] == "multiclass" else 1,
            prediction_mode=routing["prediction_mode"],
            stay_step=section.per_stay_step,
        )
        return ModelConfig(n_features=n_features, encoder=encoder, grouping=grouping,
                           aggregator=aggregator, backbone=backbone)
    except ValidationError as e:
        raise ConfigError(_format_validation("model", e)) from None


def build_train_config(section: TrainSection, task: str) -> TrainConfig:
    values = {k: getattr(section, k) if getattr(section, k) is not None else v
              for k, v in TRAIN_DEFAULTS.items() if k in TrainSection.model_fields}
    values.update({k: v for k, v in TRAIN_DEFAULTS.items() if k not in TrainSection.model_fields})
    if values.get("grad_clip") == 0:
        values["grad_clip"] = None
    try:
        return TrainConfig(seed=section.seed, task_kind=task, **values)
    except ValidationError as e:
        raise ConfigError(_format_validation("train", e)) from None
