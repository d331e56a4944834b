# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Esecuzione parallela
Pool di processi locale per task indipendenti (es. impostazioni di una sweep).
Risultati restituiti nell'ordine degli input.
"""

import logging
from concurrent.futures import Future, ProcessPoolExecutor, as_completed
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

from stepembed.config.settings import max_workers

logger = logging.getLogger("stepembed.parallel")

T = TypeVar("T")
R = TypeVar("R")


def run_parallel(fn: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None,
                 parallel: bool = True) -> List[R]:
    """
    Esegui fn su ogni item; fn e item devono essere picklable.
    Con parallel=False (o un solo item) l'esecuzione è sequenziale nello stesso processo.
    Un'eccezione in un task viene rilanciata dopo il completamento degli altri.
    """
    if not items:
        return []
    if not parallel or len(items) == 1:
        return [fn(item) for item in items]

    n_workers = min(workers or max_workers(), len(items))
    logger.info(f"⚙️ Pool di processi: {n_workers} worker per {len(items)} task")
    results: List[Optional[R]] = [None] * len(items)
    errors: Dict[int, BaseException] = {}
    with ProcessPoolExecutor(max_workers=n_workers) as executor:
        futures: Dict[Future, int] = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in as_completed(futures):
            idx = futures[future]
            try:
                results[idx] = future.result()
            except Exception as e:
                logger.error(f"Task {idx} fallito: {e}")
                errors[idx] = e
    if errors:
        raise errors[min(errors)]
    return results  # type: ignore[return-value]
