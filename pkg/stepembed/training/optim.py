# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Ottimizzazione
Adam, clipping della norma globale dei gradienti, early stopping sulla loss di validazione.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from stepembed.engine.diffcore import Tensor

logger = logging.getLogger("stepembed.optim")


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Riscala in place se la norma globale supera max_norm; ritorna la norma prima del clip."""
    norm = global_grad_norm(grads)
    if max_norm is not None and norm > max_norm > 0.0:
        factor = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * factor
        logger.debug(f"✂️ Clip gradienti: norma {norm:.4f} → {max_norm}")
    return norm


class Adam:
    """Adam con correzione del bias; stato per nome di parametro."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EarlyStopping:
    """
    Miglioramento = calo stretto della loss di validazione oltre min_delta.
    Stop dopo `patience` epoche consecutive senza miglioramento.
    """
    patience: int = 10
    min_delta: float = 1e-6
    best: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    history: List[float] = field(default_factory=list)

    def update(self, epoch: int, val_loss: float) -> bool:
        """Registra l'epoca; True se è un nuovo migliore."""
        self.history.append(val_loss)
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience
