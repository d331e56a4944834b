# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED - Pydantic Schemas
Specifiche di architettura e training, sezioni del file di esperimento.
Chiavi sconosciute rifiutate ovunque (extra="forbid").
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

EncoderKind = Literal["none", "linear", "mlp", "resnet", "ftt"]
AggregationMethod = Literal["mean", "sum", "concat", "attention"]
BackboneKind = Literal["gru", "transformer", "tcn"]
HeadKind = Literal["binary", "multiclass", "regression"]
PredictionMode = Literal["per_step", "per_stay"]
TaskKind = Literal["online_binary", "per_stay_binary", "multiclass", "regression"]
SplitName = Literal["train", "val", "test"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# === Gruppi di feature ===

class FeatureGroup(StrictModel):
    """Concetto M_k: nome + indici di feature nell'ordine dichiarato."""
    name: str
    indices: List[int]


class GroupingScheme(StrictModel):
    """Partizione nominata degli indici di feature in K gruppi."""
    name: str = "none"
    groups: List[FeatureGroup]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_names(self) -> List[str]:
        return [g.name for g in self.groups]


# === Encoder ===

class EncoderSpec(StrictModel):
    """Encoder step-wise f_θ."""
    kind: EncoderKind = "ftt"
    input_dim: int = Field(..., ge=1)
    output_dim: int = Field(..., ge=1)
    depth: int = Field(1, ge=1)
    hidden_dim: int = Field(32, ge=1)
    token_dim: int = Field(64, ge=1)
    heads: int = Field(2, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    attention_dropout: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == "ftt" and self.token_dim % self.heads != 0:
            raise ValueError(f"token_dim {self.token_dim} non divisibile per heads {self.heads}")
        if self.kind == "none" and self.output_dim != self.input_dim:
            raise ValueError("encoder 'none' richiede output_dim == input_dim")
        return self


# === Aggregatore ===

class AggregatorSpec(StrictModel):
    """Funzione di aggregazione g_ψ sui K embedding di concetto."""
    method: AggregationMethod = "mean"
    group_dim: int = Field(..., ge=1)
    n_groups: int = Field(..., ge=1)
    output_dim: int = Field(..., ge=1)
    agg_depth: int = Field(2, ge=1)
    agg_heads: int = Field(2, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    attention_dropout: float = Field(0.0, ge=0.0, lt=1.0)
    max_concat_dim: int = Field(4096, ge=1)

    @model_validator(mode="after")
    def _check_method(self):
        if self.method == "attention" and self.group_dim % self.agg_heads != 0:
            raise ValueError(f"group_dim {self.group_dim} non divisibile per agg_heads {self.agg_heads}")
        if self.method == "concat" and self.n_groups * self.group_dim > self.max_concat_dim:
            raise ValueError(
                f"concat: K·dim = {self.n_groups * self.group_dim} supera il limite {self.max_concat_dim}")
        return self


# === Backbone ===

class BackboneSpec(StrictModel):
    """Modello sequenziale causale + testa di predizione."""
    kind: BackboneKind = "gru"
    input_dim: int = Field(..., ge=1)
    hidden_dim: int = Field(64, ge=1)
    depth: int = Field(1, ge=1)
    heads: int = Field(1, ge=1)
    kernel_size: int = Field(2, ge=1)
    dilation_base: int = Field(2, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    attention_dropout: float = Field(0.0, ge=0.0, lt=1.0)
    head_kind: HeadKind = "binary"
    n_classes: int = Field(1, ge=1)
    prediction_mode: PredictionMode = "per_step"
    stay_step: Optional[int] = None  # None = ultimo step osservato

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == "transformer" and self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} non divisibile per heads {self.heads}")
        if self.head_kind == "multiclass" and self.n_classes < 2:
            raise ValueError("head multiclass richiede n_classes >= 2")
        return self

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.head_kind == "multiclass" else 1


# === Modello completo ===

class ModelConfig(StrictModel):
    """Architettura completa: embedding (D o G) + backbone + testa."""
    n_features: int = Field(..., ge=1)
    encoder: EncoderSpec
    grouping: Optional[GroupingScheme] = None
    aggregator: Optional[AggregatorSpec] = None
    backbone: BackboneSpec

    @model_validator(mode="after")
    def _check_pipeline(self):
        if self.encoder.input_dim != self.n_features:
            raise ValueError("encoder.input_dim deve essere uguale a n_features")
        if self.grouping is not None:
            if self.encoder.kind == "none":
                raise ValueError("encoder 'none' è valido solo nello scenario diretto")
            if self.aggregator is None:
                raise ValueError("scenario a gruppi senza aggregatore")
            if self.aggregator.n_groups != self.grouping.n_groups:
                raise ValueError("aggregator.n_groups diverso dal numero di gruppi")
            if self.aggregator.group_dim != self.encoder.output_dim:
                raise ValueError("aggregator.group_dim diverso da encoder.output_dim")
        if self.backbone.input_dim != self.embedding_dim:
            raise ValueError(
                f"backbone.input_dim {self.backbone.input_dim} != dimensione embedding {self.embedding_dim}")
        return self

    @property
    def grouped(self) -> bool:
        return self.grouping is not None

    @property
    def embedding_dim(self) -> int:
        if self.grouping is not None and self.aggregator is not None:
            return self.aggregator.output_dim
        return self.encoder.output_dim

    def group_specs(self) -> List[EncoderSpec]:
        """Stessa architettura per ogni concetto, input_dim = |M_k|."""
        if self.grouping is None:
            return []
        return [self.encoder.model_copy(update={"input_dim": len(g.indices)})
                for g in self.grouping.groups]


class TrainConfig(StrictModel):
    """Iperparametri di training."""
    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(100, ge=1)
    patience: int = Field(10, ge=1)
    min_delta: float = Field(1e-6, ge=0.0)
    l1_weight: float = Field(1e-3, ge=0.0)
    grad_clip: Optional[float] = Field(1.0, gt=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    seed: int = Field(0, ge=0)
    task_kind: TaskKind = "online_binary"


# === Sezioni del file di esperimento ===

class DataSection(StrictModel):
    """[data] — percorsi e parametri del generatore sintetico."""
    dir: str = "data/synthetic"
    data_csv: Optional[str] = None
    labels_csv: Optional[str] = None
    splits_csv: Optional[str] = None
    groups_csv: Optional[str] = None
    step_hours: float = Field(1.0, gt=0.0)
    task: TaskKind = "online_binary"
    n_stays: int = Field(200, ge=3)
    T: int = Field(32, ge=1)
    min_T: Optional[int] = Field(None, ge=1)
    K: int = Field(4, ge=1)
    feats_per_group: int = Field(6, ge=2)
    missing_rate: float = Field(0.3, ge=0.0, lt=1.0)
    signal_groups: Optional[str] = None

    @field_validator("signal_groups")
    @classmethod
    def _check_signal_groups(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and v.strip():
            [int(s) for s in v.split(",")]
        return v

    def signal_group_list(self) -> Optional[List[int]]:
        if not self.signal_groups or not self.signal_groups.strip():
            return None
        return [int(s) for s in self.signal_groups.split(",")]


class ModelSection(StrictModel):
    """[model] — campi None risolti dai registri di default."""
    encoder: EncoderKind = "ftt"
    grouping: str = "true"  # true | interleaved | none | <percorso groups CSV>
    aggregation: AggregationMethod = "attention"
    embedding_dim: Optional[int] = Field(None, ge=1)
    encoder_depth: Optional[int] = Field(None, ge=1)
    encoder_hidden: Optional[int] = Field(None, ge=1)
    token_dim: Optional[int] = Field(None, ge=1)
    encoder_heads: Optional[int] = Field(None, ge=1)
    encoder_dropout: Optional[float] = Field(None, ge=0.0, lt=1.0)
    encoder_attention_dropout: Optional[float] = Field(None, ge=0.0, lt=1.0)
    agg_depth: Optional[int] = Field(None, ge=1)
    agg_heads: Optional[int] = Field(None, ge=1)
    backbone: BackboneKind = "gru"
    backbone_hidden: Optional[int] = Field(None, ge=1)
    backbone_depth: Optional[int] = Field(None, ge=1)
    backbone_heads: Optional[int] = Field(None, ge=1)
    kernel_size: Optional[int] = Field(None, ge=1)
    dilation_base: Optional[int] = Field(None, ge=1)
    backbone_dropout: Optional[float] = Field(None, ge=0.0, lt=1.0)
    backbone_attention_dropout: Optional[float] = Field(None, ge=0.0, lt=1.0)
    per_stay_step: Optional[int] = Field(None, ge=0)


class TrainSection(StrictModel):
    """[train] — TrainConfig senza task_kind (derivato da [data])."""
    learning_rate: Optional[float] = Field(None, gt=0.0)
    batch_size: Optional[int] = Field(None, ge=1)
    max_epochs: Optional[int] = Field(None, ge=1)
    patience: Optional[int] = Field(None, ge=1)
    min_delta: Optional[float] = Field(None, ge=0.0)
    l1_weight: Optional[float] = Field(None, ge=0.0)
    grad_clip: Optional[float] = Field(None, ge=0.0)  # 0 = disabilitato
    seed: int = Field(0, ge=0)


class OutputSection(StrictModel):
    """[output]"""
    dir: str = "runs/default"


class ExperimentConfig(StrictModel):
    data: DataSection
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    output: OutputSection = OutputSection()
