# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Training end-to-end
- task_loss: BCE con logit | cross-entropy softmax | MAE, media sulle sole entrate valide
- regularized_loss: + λ·Σ|θ| sui parametri di embedding (encoder + aggregatore)
- train: Adam, clipping, validazione per epoca, early stopping, ritorno al miglior checkpoint
- evaluate: forward in modalità eval + metriche del task
Deterministico dato il seed (ordine dei batch, dropout, inizializzazione).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from stepembed.config.defaults import TASK_ROUTING
from stepembed.data.datapipe import Batch, TimeSeriesDataset, make_batches
from stepembed.data.preprocessing import preprocess_dataset
from stepembed.engine.diffcore import GraphTape, Tensor, backward_grads
from stepembed.engine.errors import NumericError, TrainingDiverged
from stepembed.engine.layers import Params
from stepembed.models.schemas import ModelConfig, TrainConfig
from stepembed.pipeline import embedding_params, init_model_params, model_forward, parameter_count
from stepembed.training.metrics import task_metrics
from stepembed.training.optim import Adam, EarlyStopping, clip_grad_norm

logger = logging.getLogger("stepembed.trainer")

EVAL_BATCH_SIZE = 64


# ============================================================
# LOSS
# ============================================================

@dataclass
class TaskLoss:
    value: Tensor
    n_valid: int
    empty: bool = False


def task_loss(tape: GraphTape, task_kind: str, logits: Tensor, targets: np.ndarray,
              mask: np.ndarray) -> TaskLoss:
    """
    Media della loss per elemento sulle entrate con mask True.
    logits (…) per binary/regression, (…, C) per multiclass; targets e mask con forma (…).
    """
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("task_loss: logit non finiti")
    head = TASK_ROUTING[task_kind]["head_kind"]
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.float64)
    n_valid = int(mask.sum())
    if n_valid == 0:
        logger.warning("⚠️ Batch senza entrate valide: contributo nullo alla loss")
        return TaskLoss(value=tape.scale(tape.reduce_sum(logits), 0.0), n_valid=0, empty=True)

    y = np.where(mask, targets, 0.0)
    if head == "binary":
        per_item = tape.sub(tape.softplus(logits), tape.multiply(logits, tape.constant(y)))
    elif head == "multiclass":
        n_classes = logits.shape[-1]
        onehot = np.eye(n_classes)[y.astype(np.int64)]
        picked = tape.reduce_sum(tape.multiply(tape.log_softmax(logits, axis=-1), tape.constant(onehot)),
                                 axis=-1)
        per_item = tape.scale(picked, -1.0)
    else:
        per_item = tape.abs(tape.sub(logits, tape.constant(y)))
    weights = tape.constant(mask.astype(np.float64) / n_valid)
    return TaskLoss(value=tape.reduce_sum(tape.multiply(per_item, weights)), n_valid=n_valid)


def regularized_loss(tape: GraphTape, loss: Tensor, params: Mapping[str, Tensor],
                     l1_weight: float) -> Tensor:
    """loss + λ·Σ|θ| su θ di embedding; sottogradiente 0 in θ = 0."""
    if l1_weight < 0:
        raise ValueError(f"l1_weight deve essere >= 0, ricevuto {l1_weight}")
    emb = embedding_params(params)
    if l1_weight == 0.0 or not emb:
        return loss
    penalty = None
    for name in sorted(emb):
        term = tape.reduce_sum(tape.abs(emb[name]))
        penalty = term if penalty is None else tape.add(penalty, term)
    return tape.add(loss, tape.scale(penalty, l1_weight))


def embedding_l1_norm(params: Mapping[str, Tensor]) -> float:
    return float(sum(np.abs(t.data).sum() for t in embedding_params(params).values()))


# ============================================================
# STORIA
# ============================================================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    improved: bool


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    primary_metric: str = "auprc"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.records],
                            columns=["epoch", "train_loss", "val_loss", "val_metric", "improved"])

    @property
    def best_val_loss(self) -> float:
        losses = [r.val_loss for r in self.records if r.epoch == self.best_epoch]
        return losses[0] if losses else math.inf


@dataclass
class TrainResult:
    params: Params
    history: TrainHistory
    dataset: TimeSeriesDataset


def derive_seed(*keys: int) -> int:
    """Seed derivato stabile per (seed, epoca, batch, ...)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


def copy_params(params: Mapping[str, Tensor]) -> Params:
    return {name: Tensor(t.data.copy(), requires_grad=True, name=name) for name, t in params.items()}


# ============================================================
# FORWARD SUI BATCH
# ============================================================

def batch_forward(tape: GraphTape, config: ModelConfig, params: Mapping[str, Tensor],
                  batch: Batch) -> Tensor:
    X = tape.leaf("X", Tensor(batch.X))
    return model_forward(tape, config, params, X, lengths=batch.lengths).predictions


def collect_outputs(config: ModelConfig, params: Mapping[str, Tensor], dataset: TimeSeriesDataset,
                    split: str, task_kind: str,
                    batch_size: int = EVAL_BATCH_SIZE) -> Tuple[np.ndarray, np.ndarray, float]:
    """Output e target delle entrate valide dello split + loss media (modalità eval)."""
    outputs, targets = [], []
    total, count = 0.0, 0
    for batch in make_batches(dataset, split, batch_size, seed=None):
        tape = GraphTape(mode="eval")
        preds = batch_forward(tape, config, params, batch)
        loss = task_loss(tape, task_kind, preds, batch.labels, batch.label_mask)
        total += loss.value.item() * loss.n_valid
        count += loss.n_valid
        outputs.append(preds.data[batch.label_mask])
        targets.append(batch.labels[batch.label_mask])
    mean_loss = total / count if count else 0.0
    return np.concatenate(outputs, axis=0), np.concatenate(targets, axis=0), mean_loss


# ============================================================
# TRAIN / EVALUATE
# ============================================================

def train(model_config: ModelConfig, train_config: TrainConfig, dataset: TimeSeriesDataset,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """
    Training end-to-end. La loss di validazione (senza termine L1) guida l'early stopping;
    ritorna i parametri dell'epoca migliore.
    """
    dataset = preprocess_dataset(dataset)
    task = train_config.task_kind
    primary = TASK_ROUTING[task]["primary_metric"]
    seed = train_config.seed

    params = init_model_params(model_config, seed=seed)
    optimizer = Adam(params, lr=train_config.learning_rate, beta1=train_config.adam_beta1,
                     beta2=train_config.adam_beta2, eps=train_config.adam_eps)
    stopper = EarlyStopping(patience=train_config.patience, min_delta=train_config.min_delta)
    history = TrainHistory(primary_metric=primary)
    best_params = copy_params(params)

    logger.info(f"🚀 Training: task={task}, encoder={model_config.encoder.kind}, "
                f"gruppi={model_config.grouping.n_groups if model_config.grouped else 0}, "
                f"backbone={model_config.backbone.kind}, seed={seed}")
    counts = parameter_count(params)
    logger.info("🔢 Parametri: " + ", ".join(f"{k}={v}" for k, v in counts.items())
                + f" (totale {sum(counts.values())})")

    for epoch in range(1, train_config.max_epochs + 1):
        batches = make_batches(dataset, "train", train_config.batch_size, seed=derive_seed(seed, epoch))
        total, count = 0.0, 0
        for i, batch in enumerate(batches):
            tape = GraphTape(mode="train", seed=derive_seed(seed, epoch, i))
            preds = batch_forward(tape, model_config, params, batch)
            try:
                loss = task_loss(tape, task, preds, batch.labels, batch.label_mask)
            except NumericError as e:
                raise TrainingDiverged(f"Epoca {epoch}, batch {i}: {e}", params=best_params,
                                       history=history) from None
            if loss.empty:
                continue
            objective = regularized_loss(tape, loss.value, params, train_config.l1_weight)
            if not math.isfinite(objective.item()):
                logger.error(f"❌ Loss non finita all'epoca {epoch}, batch {i}")
                raise TrainingDiverged(f"Loss non finita all'epoca {epoch}, batch {i}",
                                       params=best_params, history=history)
            grads = backward_grads(tape, objective, params)
            grads = {name: g for name, g in grads.items() if name in params}
            clip_grad_norm(grads, train_config.grad_clip)
            optimizer.step(grads)
            total += loss.value.item() * loss.n_valid
            count += loss.n_valid

        train_loss = total / count if count else 0.0
        outputs, targets, val_loss = collect_outputs(model_config, params, dataset, "val", task)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"Loss di validazione non finita all'epoca {epoch}",
                                   params=best_params, history=history)
        val_metric = task_metrics(task, outputs, targets, dataset.step_hours)[primary]
        improved = stopper.update(epoch, val_loss)
        if improved:
            best_params = copy_params(params)
        record = EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                             val_metric=val_metric, improved=improved)
        history.records.append(record)
        logger.info(f"📈 Epoca {epoch}: train={train_loss:.5f} val={val_loss:.5f} "
                    f"{primary}={val_metric:.4f} pazienza={stopper.bad_epochs}/{stopper.patience}")
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            logger.info(f"⏹️ Early stopping all'epoca {epoch} (migliore: {stopper.best_epoch})")
            break

    history.best_epoch = stopper.best_epoch
    return TrainResult(params=best_params, history=history, dataset=dataset)


def evaluate(model_config: ModelConfig, params: Mapping[str, Tensor], dataset: TimeSeriesDataset,
             split: str, task_kind: Optional[str] = None,
             batch_size: int = EVAL_BATCH_SIZE) -> Dict[str, float]:
    """Metriche del task sullo split (più n, prevalenza per task binari e loss media)."""
    task = task_kind or dataset.task
    outputs, targets, loss = collect_outputs(model_config, params, dataset, split, task, batch_size)
    record = task_metrics(task, outputs, targets, dataset.step_hours)
    record["loss"] = loss
    logger.info(f"🧾 Valutazione {split}: " + ", ".join(f"{k}={v:.4f}" for k, v in record.items()))
    return record


def dump_scores(model_config: ModelConfig, params: Mapping[str, Tensor], dataset: TimeSeriesDataset,
                split: str, task_kind: Optional[str] = None) -> pd.DataFrame:
    """Output e target delle entrate valide (una riga per entrata; colonne output_c per multiclass)."""
    outputs, targets, _ = collect_outputs(model_config, params, dataset, split, task_kind or dataset.task)
    if outputs.ndim == 2:
        frame = pd.DataFrame(outputs, columns=[f"output_{c}" for c in range(outputs.shape[1])])
    else:
        frame = pd.DataFrame({"output": outputs})
    frame["target"] = targets
    return frame
