# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Embedding per time-step di serie temporali tabellari eterogenee.

Pipeline:
  dati grezzi → imputazione/scaling → embedding step-wise (diretto o per gruppi)
  → backbone causale (GRU / Transformer / TCN) → predizione → metriche/attenzione
"""

__version__ = "0.3.0"
