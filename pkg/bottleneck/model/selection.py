"""
Rewrite index sets: the just-completed step (recent) plus, per layer, the k
earlier positions its tokens attended to most (recalled).
"""

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cache import CacheState


@dataclass
class LayerSelection:
    recent: np.ndarray
    recalled: np.ndarray
    alpha: np.ndarray

    @property
    def merged(self) -> np.ndarray:
        """Union of recalled and recent positions in ascending order."""
        return np.concatenate((self.recalled, self.recent))

    def is_recalled(self) -> np.ndarray:
        """Boolean flag per `merged` row."""
        return np.concatenate(
            (np.ones(self.recalled.size, dtype=bool), np.zeros(self.recent.size, dtype=bool))
        )


@dataclass
class SelectionSet:
    step_span: tuple[int, int]
    layers: list[LayerSelection]


def compute_recall_mass(
    attention_rows: Mapping[int, np.ndarray], recent: Sequence[int], n_prev: int
) -> np.ndarray:
    """
    Average attention each earlier position received from the recent tokens.

    alpha_i = mean over heads h and queries j in `recent` of A[h, j, i], for
    i in [0, n_prev).

    Args:
        attention_rows (Mapping[int, np.ndarray]): Query position j -> [H, j + 1].
        recent (Sequence[int]): Query positions of the completed step.
        n_prev (int): Number of positions before the step.

    Returns:
        np.ndarray: alpha of shape [n_prev], not renormalized.

    Raises:
        ValueError: If a row for a recent position is missing or too short.
    """
    if len(recent) == 0:
        raise ValueError("recall mass needs at least one recent position")
    rows = []
    for j in recent:
        row = attention_rows.get(int(j))
        if row is None:
            raise ValueError(f"missing attention row for position {j}")
        if row.shape[-1] < n_prev:
            raise ValueError(f"attention row for position {j} covers {row.shape[-1]} < {n_prev} keys")
        rows.append(row[:, :n_prev])
    return np.stack(rows).mean(axis=(0, 1))


def select_topk(alpha: np.ndarray, k: int) -> np.ndarray:
    """
    Positions of the k largest alpha values, smaller position first on ties.

    Returns:
        np.ndarray: min(k, len(alpha)) positions in ascending order.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    order = np.lexsort((np.arange(alpha.size), -alpha))
    return np.sort(order[: min(k, alpha.size)]).astype(np.int64)


def build_selection(cache: CacheState, step_span: tuple[int, int], k: int) -> SelectionSet:
    """
    Build per-layer rewrite sets for a just-completed step.

    Args:
        cache (CacheState): Cache whose attention buffer holds the step's rows.
        step_span (tuple[int, int]): Half-open span of the completed step; the
            prompt at the first invocation.
        k (int): Reconsolidation budget per layer.

    Raises:
        ValueError: If the span is empty or outside the cache.
    """
    start, end = step_span
    if end <= start:
        raise ValueError(f"empty step span {step_span}")
    if start < 0 or end > cache.length:
        raise ValueError(f"step span {step_span} outside cache of length {cache.length}")
    recent = np.arange(start, end, dtype=np.int64)
    layers = []
    for rows in cache.attention_rows:
        alpha = compute_recall_mass(rows, recent, start)
        layers.append(LayerSelection(recent=recent, recalled=select_topk(alpha, k), alpha=alpha))
    return SelectionSet(step_span=(start, end), layers=layers)


def selection_dump_rows(invocation: int, selection: SelectionSet) -> list[dict]:
    """Rows of (invocation, layer, index, alpha, selected) for every earlier position."""
    rows = []
    for layer, chosen in enumerate(selection.layers):
        picked = set(chosen.recalled.tolist())
        for index, alpha in enumerate(chosen.alpha):
            rows.append(
                {
                    "invocation": invocation,
                    "layer": layer,
                    "index": index,
                    "alpha": float(alpha),
                    "selected": int(index in picked),
                }
            )
    return rows
