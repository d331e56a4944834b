# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
# Config Package
