import logging
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, no_grad

logger = logging.getLogger(__name__)


class NonDeterministicError(RuntimeError):
    pass


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        return f().item()


def _numeric(f: Callable[[], Tensor], flat: np.ndarray, i: int, eps: float, order: int) -> float:
    original = flat[i]

    def at(offset: float) -> float:
        flat[i] = original + offset
        return _evaluate(f)

    try:
        if order == 2:
            return (at(eps) - at(-eps)) / (2.0 * eps)
        near = at(eps) - at(-eps)
        far = at(2.0 * eps) - at(-2.0 * eps)
        return (8.0 * near - far) / (12.0 * eps)
    finally:
        flat[i] = original


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-12,
    order: int = 2,
) -> float:
    """
    Compare tape gradients against central finite differences.

    Args:
        f (Callable[[], Tensor]): Closure computing a scalar loss from `params`.
        params (Sequence[Tensor]): float64 leaves that require a gradient.
        eps (float, optional): Central-difference step.
        floor (float, optional): Lower bound on the relative-error denominator.
        order (int, optional): 2 for the two-point stencil, 4 for the
            four-point one, whose smaller truncation error allows a wider step.

    Returns:
        float: max over every parameter entry of
            |analytic - numeric| / max(|analytic|, |numeric|, floor).

    Raises:
        ValueError: If a parameter is not float64 or does not require a gradient,
            or the order is not 2 or 4.
        NonDeterministicError: If two evaluations of `f` disagree.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    for param in params:
        if param.dtype != np.float64:
            raise ValueError(f"finite_diff_check needs float64 parameters, got {param.dtype}")
        if not param.requires_grad:
            raise ValueError(f"parameter {param.name or param.shape} does not require grad")

    first, second = _evaluate(f), _evaluate(f)
    if first != second:
        raise NonDeterministicError(f"f is not deterministic: {first!r} != {second!r}")

    for param in params:
        param.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss, leaves=params)

    worst = 0.0
    for param in params:
        analytic = param.grad.reshape(-1)
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            numeric = _numeric(f, flat, i, eps, order)
            a = float(analytic[i])
            error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, error)
    logger.debug("finite_diff_check: max relative error %.3e", worst)
    return worst
