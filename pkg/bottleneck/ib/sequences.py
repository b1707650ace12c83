"""
Exact next-step likelihood of a toy sequence model and the two information
bounds on it.

With a deterministic encoder c_n = f(s_{0:n}) and predictor q(s_{n+1} | c_n),

    L = sum_{n<N} E[log2 q(s_{n+1} | c_n)]
    L <= sum_{n<N} I(C_n; S_{n+1}) - H(S_{n+1})
    L <= sum_{1<=n<=N} I(S_{0:n}; C_n) - sum_{n<N} H(S_{n+1} | S_{0:n})

and hence also L <= the average of the two right-hand sides.
"""

from dataclasses import dataclass

import numpy as np

from ..schemas.stats import BoundsReport
from .information import conditional_entropy, entropy, exact_mi, flatten_joint

BOUND_TOLERANCE = 1e-9
MAX_STATES = 10**6


@dataclass
class ToySeqModel:
    """
    Attributes:
        p (np.ndarray): Joint p(s_0, ..., s_N), shape (A,) * (N + 1).
        codes (list[np.ndarray]): codes[n] maps a prefix s_{0:n} (shape
            (A,) * (n + 1)) to an integer code, for n = 0..N.
        q (list[np.ndarray]): q[n] has shape (n_codes_n, A); row c is the
            predicted distribution of s_{n+1}, for n = 0..N-1.
    """

    p: np.ndarray
    codes: list[np.ndarray]
    q: list[np.ndarray]

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.size > MAX_STATES:
            raise ValueError(f"{self.p.size} states exceed the enumeration cap of {MAX_STATES}")
        if len(set(self.p.shape)) != 1 or self.p.ndim < 2:
            raise ValueError(f"p must have shape (A,) * (N + 1) with N >= 1, got {self.p.shape}")
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-12:
            raise ValueError("p must be a probability table")
        horizon, alphabet = self.horizon, self.alphabet
        if len(self.codes) != horizon + 1 or len(self.q) != horizon:
            raise ValueError(
                f"need {horizon + 1} code tables and {horizon} predictors, "
                f"got {len(self.codes)} and {len(self.q)}"
            )
        for n, table in enumerate(self.codes):
            if table.shape != (alphabet,) * (n + 1) or table.min() < 0:
                raise ValueError(f"codes[{n}] must be a non-negative int table of shape {(alphabet,) * (n + 1)}")
        for n, table in enumerate(self.q):
            if table.shape != (self.n_codes(n), alphabet):
                raise ValueError(f"q[{n}] has shape {table.shape}, expected {(self.n_codes(n), alphabet)}")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError(f"q[{n}] rows must be distributions")

    @property
    def alphabet(self) -> int:
        return self.p.shape[0]

    @property
    def horizon(self) -> int:
        return self.p.ndim - 1

    def n_codes(self, n: int) -> int:
        return int(self.codes[n].max()) + 1

    def prefix_marginal(self, n: int) -> np.ndarray:
        """p(s_{0:n}), shape (A,) * (n + 1)."""
        return self.p.sum(axis=tuple(range(n + 1, self.p.ndim)))

    def prefix_next_joint(self, n: int) -> np.ndarray:
        """p(s_{0:n}, s_{n+1}) as a [A^(n+1), A] table."""
        return flatten_joint(self.prefix_marginal(n + 1), n + 1)

    def code_next_joint(self, n: int) -> np.ndarray:
        """p(c_n, s_{n+1}) as a [n_codes, A] table."""
        table = np.zeros((self.n_codes(n), self.alphabet))
        np.add.at(table, self.codes[n].reshape(-1), self.prefix_next_joint(n))
        return table

    def prefix_code_joint(self, n: int) -> np.ndarray:
        """p(s_{0:n}, c_n) as a [A^(n+1), n_codes] table."""
        marginal = self.prefix_marginal(n).reshape(-1)
        table = np.zeros((marginal.size, self.n_codes(n)))
        table[np.arange(marginal.size), self.codes[n].reshape(-1)] = marginal
        return table

    def likelihood(self) -> float:
        """L in bits; -inf when q gives zero probability to a reachable step."""
        total = 0.0
        for n in range(self.horizon):
            joint = self.code_next_joint(n)
            support = joint > 0
            if np.any(self.q[n][support] == 0):
                return float("-inf")
            total += float(np.sum(joint[support] * np.log2(self.q[n][support])))
        return total


def verify_theorem_bounds(model: ToySeqModel, tolerance: float = BOUND_TOLERANCE) -> BoundsReport:
    """
    Compute L and both bounds exactly and check L <= each (and their average).

    A model whose q misses part of p's support has L = -inf; the bounds then
    hold vacuously and the report is flagged degenerate.
    """
    horizon = model.horizon
    likelihood = model.likelihood()
    next_info = sum(exact_mi(model.code_next_joint(n)) for n in range(horizon))
    next_entropy = sum(entropy(model.code_next_joint(n).sum(axis=0)) for n in range(horizon))
    cond_entropy = sum(conditional_entropy(model.prefix_next_joint(n)) for n in range(horizon))
    encoder_info = 0.0
    identity_gap = 0.0
    for n in range(1, horizon + 1):
        joint = model.prefix_code_joint(n)
        info = exact_mi(joint)
        encoder_info += info
        identity_gap = max(identity_gap, abs(info - entropy(joint.sum(axis=0))))

    bound_1 = next_info - next_entropy
    bound_2 = encoder_info - cond_entropy
    bound_avg = 0.5 * (bound_1 + bound_2)
    violations = [
        name
        for name, bound in (("bound_1", bound_1), ("bound_2", bound_2), ("bound_avg", bound_avg))
        if likelihood > bound + tolerance
    ]
    return BoundsReport(
        likelihood=likelihood,
        bound_1=bound_1,
        bound_2=bound_2,
        bound_avg=bound_avg,
        margin_1=bound_1 - likelihood,
        margin_2=bound_2 - likelihood,
        margin_avg=bound_avg - likelihood,
        degenerate=likelihood == float("-inf"),
        encoder_identity_gap=identity_gap,
        violations=violations,
    )


def _random_codes(rng: np.random.Generator, alphabet: int, n: int) -> np.ndarray:
    states = alphabet ** (n + 1)
    kind = rng.random()
    if kind < 0.2:
        flat = np.zeros(states, dtype=np.int64)
    elif kind < 0.4:
        flat = np.arange(states, dtype=np.int64)
    else:
        flat = rng.integers(0, rng.integers(1, states + 1), size=states)
        _, flat = np.unique(flat, return_inverse=True)
    return flat.reshape((alphabet,) * (n + 1)).astype(np.int64)


def random_toy_model(
    rng: np.random.Generator, max_alphabet: int = 4, max_horizon: int = 4, degenerate_rate: float = 0.05
) -> ToySeqModel:
    """
    A random model with A in [2, max_alphabet] and N in [1, max_horizon].

    Encoders mix constant, injective and random many-to-one maps; a small
    fraction of predictors put zero mass where p has support.
    """
    alphabet = int(rng.integers(2, max_alphabet + 1))
    horizon = int(rng.integers(1, max_horizon + 1))
    p = rng.dirichlet(np.ones(alphabet ** (horizon + 1)))
    if rng.random() < 0.3:
        p[rng.random(p.size) < 0.3] = 0.0
        if p.sum() == 0:
            p[0] = 1.0
    p = (p / p.sum()).reshape((alphabet,) * (horizon + 1))
    codes = [_random_codes(rng, alphabet, n) for n in range(horizon + 1)]
    q = []
    for n in range(horizon):
        table = rng.dirichlet(np.ones(alphabet), size=int(codes[n].max()) + 1)
        if rng.random() < degenerate_rate:
            table[:, 0] = 0.0
            table[:, 1:] += 1e-3
        q.append(table / table.sum(axis=1, keepdims=True))
    return ToySeqModel(p, codes, q)


def true_conditional_model(p: np.ndarray) -> ToySeqModel:
    """Injective encoders with q equal to the true next-step conditional."""
    p = np.asarray(p, dtype=np.float64)
    alphabet, horizon = p.shape[0], p.ndim - 1
    codes = [np.arange(alphabet ** (n + 1)).reshape((alphabet,) * (n + 1)) for n in range(horizon + 1)]
    q = []
    for n in range(horizon):
        joint = flatten_joint(p.sum(axis=tuple(range(n + 2, p.ndim))), n + 1)
        rows = joint.sum(axis=1, keepdims=True)
        conditional = np.where(rows > 0, joint / np.where(rows > 0, rows, 1.0), 1.0 / alphabet)
        q.append(conditional)
    return ToySeqModel(p, codes, q)
