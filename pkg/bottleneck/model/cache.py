from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..numerics.ops import concat
from ..numerics.tensor import ShapeError, Tensor


@dataclass
class CacheState:
    """
    Externally mutable KV cache of one generation session.

    Attributes:
        keys (list[Tensor]): Per layer, post-rotation keys of shape [t, H, d_k].
        values (list[Tensor]): Per layer, values of shape [t, H, d_k].
        last_hidden (Tensor | None): o_t, the final residual state (before the
            final norm) of the most recent token.
        attention_rows (list[dict[int, np.ndarray]]): Per layer, attention
            probabilities [H, j + 1] for each query position j since `boundary`.
        boundary (int): Start position of the in-flight step.
        tokens (list[int]): Ids of cached positions; -1 marks a latent step.
    """

    keys: list[Tensor]
    values: list[Tensor]
    last_hidden: Optional[Tensor] = None
    attention_rows: list[dict[int, np.ndarray]] = field(default_factory=list)
    boundary: int = 0
    tokens: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, n_layers: int, n_heads: int, d_k: int, dtype) -> "CacheState":
        return cls(
            keys=[Tensor(np.zeros((0, n_heads, d_k)), dtype=dtype) for _ in range(n_layers)],
            values=[Tensor(np.zeros((0, n_heads, d_k)), dtype=dtype) for _ in range(n_layers)],
            attention_rows=[{} for _ in range(n_layers)],
        )

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def length(self) -> int:
        return self.keys[0].shape[0]

    def append(self, layer: int, k: Tensor, v: Tensor) -> None:
        if k.shape != v.shape or k.shape[1:] != self.keys[layer].shape[1:]:
            raise ShapeError(
                f"cannot append keys {k.shape} / values {v.shape} to cache rows "
                f"{self.keys[layer].shape}"
            )
        self.keys[layer] = concat([self.keys[layer], k], axis=0)
        self.values[layer] = concat([self.values[layer], v], axis=0)

    def record_attention(self, layer: int, first_position: int, probs: np.ndarray) -> None:
        """Buffer the rows of a [H, T, t] attention block whose queries start at `first_position`."""
        rows = self.attention_rows[layer]
        for i in range(probs.shape[1]):
            j = first_position + i
            rows[j] = probs[:, i, : j + 1].copy()

    def start_step(self) -> None:
        """Mark the current length as the next step boundary and release buffered rows."""
        self.boundary = self.length
        for rows in self.attention_rows:
            rows.clear()

    def detach(self) -> "CacheState":
        """
        Return a cache holding the same values with no tape history.

        Buffers are shared; rewrites and appends always produce new arrays.
        """
        return CacheState(
            keys=[k.detach() for k in self.keys],
            values=[v.detach() for v in self.values],
            last_hidden=None if self.last_hidden is None else self.last_hidden.detach(),
            attention_rows=[dict(rows) for rows in self.attention_rows],
            boundary=self.boundary,
            tokens=list(self.tokens),
        )

    def rows_snapshot(self, layer: int, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.keys[layer].data[idx].copy(), self.values[layer].data[idx].copy()
