"""Exact entropies and mutual information of finite tables, in bits."""

import numpy as np

_SUM_TOLERANCE = 1e-9


def _check_distribution(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probability table has negative entries")
    if abs(p.sum() - 1.0) > _SUM_TOLERANCE:
        raise ValueError(f"probability table sums to {p.sum()!r}, not 1")
    return p


def entropy(p: np.ndarray) -> float:
    """H(p) in bits with 0 log 0 = 0."""
    p = _check_distribution(p).reshape(-1)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def exact_mi(joint: np.ndarray) -> float:
    """
    I(A;B) in bits for a 2-D joint table p(a, b).

    Raises:
        ValueError: If the table has negative entries or does not sum to 1.
    """
    joint = _check_distribution(joint)
    if joint.ndim != 2:
        raise ValueError(f"joint table must be 2-D, got shape {joint.shape}")
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    outer = pa * pb
    nz = joint > 0
    return float(max(0.0, np.sum(joint[nz] * np.log2(joint[nz] / outer[nz]))))


def conditional_entropy(joint: np.ndarray) -> float:
    """H(B | A) in bits for a 2-D joint table p(a, b)."""
    joint = _check_distribution(joint)
    return entropy(joint) - entropy(joint.sum(axis=1))


def flatten_joint(table: np.ndarray, split: int) -> np.ndarray:
    """View an n-D table as p(first `split` axes, remaining axes)."""
    rows = int(np.prod(table.shape[:split], dtype=np.int64))
    return table.reshape(rows, -1)
