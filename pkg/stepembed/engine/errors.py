# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Gerarchia eccezioni.
Ogni eccezione porta il codice di uscita usato dalla CLI.
"""

from typing import Any, Optional


class StepEmbedError(Exception):
    """Radice di tutte le eccezioni del pacchetto."""
    exit_code = 1


class ConfigError(StepEmbedError):
    """Chiave sconosciuta, sezione mancante o campo non valido."""
    exit_code = 2


class AttentionUnavailableError(StepEmbedError):
    """Modello senza encoder FTT per gruppo + aggregazione ad attenzione."""
    exit_code = 2


class DataError(StepEmbedError):
    """File dati non conformi, split vuoti, righe duplicate."""
    exit_code = 3


class PartitionError(DataError):
    """Partizione delle feature non valida (copertura, sovrapposizione, gruppi vuoti)."""

    def __init__(self, message: str, missing: Optional[list] = None,
                 duplicated: Optional[list] = None, empty: Optional[list] = None):
        super().__init__(message)
        self.missing = list(missing or [])
        self.duplicated = list(duplicated or [])
        self.empty = list(empty or [])


class ShapeError(StepEmbedError, ValueError):
    """Forme incompatibili per un'operazione."""
    exit_code = 4


class NumericError(StepEmbedError):
    """NaN/Inf in ingresso o in uscita, calibrazione impossibile."""
    exit_code = 4


class TapeError(StepEmbedError):
    """Uso scorretto del nastro: backward prima del forward, loss non scalare."""
    exit_code = 4


class MetricUndefinedError(StepEmbedError, ValueError):
    """Metrica non definita sull'input (una sola classe, input vuoto, p_e == 1)."""
    exit_code = 4


class TrainingDiverged(NumericError):
    """Loss non finita durante il training: porta l'ultimo checkpoint finito."""

    def __init__(self, message: str, params: Any = None, history: Any = None):
        super().__init__(message)
        self.params = params
        self.history = history
