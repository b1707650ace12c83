from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..schemas.stats import DPIReport
from .information import exact_mi

DPI_TOLERANCE = 1e-9
_ROW_TOLERANCE = 1e-12


@dataclass
class DiscreteChain:
    """
    Markov chain X -> Z_1 -> ... -> Z_m -> Y given by a prior and row-stochastic
    transition tables; `transitions[0]` is p(z_1 | x), the last one p(y | z_m).
    """

    prior: np.ndarray
    transitions: list[np.ndarray]

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.transitions = [np.asarray(t, dtype=np.float64) for t in self.transitions]
        if np.any(self.prior < 0) or abs(self.prior.sum() - 1.0) > _ROW_TOLERANCE:
            raise ValueError("prior must be a probability vector")
        size = self.prior.size
        for i, table in enumerate(self.transitions):
            if table.ndim != 2 or table.shape[0] != size:
                raise ValueError(f"transition {i} has shape {table.shape}, expected ({size}, *)")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > _ROW_TOLERANCE):
                raise ValueError(f"transition {i} rows must sum to 1")
            size = table.shape[1]

    def joints_with_source(self) -> list[np.ndarray]:
        """p(x, node) for every node after X, in chain order."""
        joint = np.diag(self.prior)
        out = []
        for table in self.transitions:
            joint = joint @ table
            out.append(joint)
        return out


def verify_dpi(chain: DiscreteChain, tolerance: float = DPI_TOLERANCE) -> DPIReport:
    """
    Check I(X; Z_i) >= I(X; Z_j) for every pair of nodes i < j.

    Returns:
        DPIReport: Per-node information, all pairwise margins and the pairs
            whose margin is below -tolerance.
    """
    mi = [exact_mi(joint) for joint in chain.joints_with_source()]
    margins, violations = [], []
    for i in range(len(mi)):
        for j in range(i + 1, len(mi)):
            margin = mi[i] - mi[j]
            margins.append((i, j, margin))
            if margin < -tolerance:
                violations.append((i, j, margin))
    return DPIReport(mutual_information=mi, margins=margins, violations=violations)


def _stochastic(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    table = rng.dirichlet(np.ones(cols), size=rows)
    return table / table.sum(axis=1, keepdims=True)


def random_chain(
    rng: np.random.Generator, max_alphabet: int = 6, max_hops: int = 4
) -> DiscreteChain:
    """
    A random chain with alphabets in [2, max_alphabet]; some hops are made
    deterministic or constant so equality cases show up.
    """
    sizes: Sequence[int] = rng.integers(2, max_alphabet + 1, size=rng.integers(2, max_hops + 2))
    prior = rng.dirichlet(np.ones(sizes[0]))
    transitions = []
    for rows, cols in zip(sizes[:-1], sizes[1:]):
        kind = rng.random()
        if kind < 0.15:
            table = np.zeros((rows, cols))
            table[:, rng.integers(cols)] = 1.0
        elif kind < 0.3:
            table = np.zeros((rows, cols))
            table[np.arange(rows), rng.integers(cols, size=rows)] = 1.0
        else:
            table = _stochastic(rng, rows, cols)
        transitions.append(table)
    return DiscreteChain(prior, transitions)
