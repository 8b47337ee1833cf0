"""Comparison policies: linux-style probabilistic placement and least-aged placement.

Neither policy ever deep-idles a core.
"""

from __future__ import annotations

import csv
from typing import Dict, Optional, Sequence, TextIO

import numpy as np

from .policy import ManagedCore


class CoreWorkLedger:
    """Cumulative busy seconds per core, used as an executed-work age estimate."""

    def __init__(self, n_cores: int):
        self.busy = [0.0] * n_cores

    def add(self, core_id: int, duration: float) -> None:
        if duration < 0:
            raise ValueError("busy time cannot be negative")
        self.busy[core_id] += duration

    def __getitem__(self, core_id: int) -> float:
        return self.busy[core_id]


def linux_select_core(
    cores: Sequence[ManagedCore],
    weights: Optional[Sequence[float]],
    rng: np.random.Generator,
) -> Optional[int]:
    """Sample an unassigned core, uniformly or by renormalized per-core weights.

    ``weights`` is indexed by core_id and covers every core.
    """
    free = [c.core_id for c in cores if c.assigned_task is None]
    if not free:
        return None
    if len(free) == 1:
        return free[0]
    if weights is None:
        return free[int(rng.integers(len(free)))]
    w = np.array([weights[i] for i in free], dtype=float)
    total = w.sum()
    if total <= 0:
        return free[int(rng.integers(len(free)))]
    u = rng.random() * total
    idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
    return free[min(idx, len(free) - 1)]


def least_aged_select_core(cores: Sequence[ManagedCore], ledger: CoreWorkLedger) -> Optional[int]:
    best = None
    best_key = None
    for c in cores:
        if c.assigned_task is not None:
            continue
        key = (ledger[c.core_id], c.core_id)
        if best_key is None or key < best_key:
            best, best_key = c.core_id, key
    return best


def load_weights_csv(stream: TextIO, n_cores: int) -> list:
    """Read ``core_id,probability`` rows into a dense weight list."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["core_id", "probability"]:
        raise ValueError(f"weights CSV header must be core_id,probability, got {header}")
    weights: Dict[int, float] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            cid, p = int(row[0]), float(row[1])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"weights CSV line {lineno}: {exc}") from exc
        if not (0 <= cid < n_cores) or p < 0:
            raise ValueError(f"weights CSV line {lineno}: bad core id or probability")
        weights[cid] = p
    dense = [weights.get(i, 0.0) for i in range(n_cores)]
    if abs(sum(dense) - 1.0) > 1e-6:
        raise ValueError(f"weights must sum to 1, got {sum(dense)}")
    return dense
