"""
Primitive operations with backward rules.

Broadcasting is limited to a leading-batch dimension: a smaller operand must
match the trailing shape of the larger one exactly. Every output is checked for
NaN/Inf.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import (
    NonFiniteError,
    Node,
    ShapeError,
    Tensor,
    active_tape,
    grad_enabled,
)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _finish(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor(out, dtype=out.dtype)
    tape = active_tape() if grad_enabled() else None
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(Node(op, tuple(inputs), result, backward))
    return result


def _check_batch_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    small, large = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < large.ndim and large.shape[large.ndim - small.ndim :] == small.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.reshape((-1, *shape)).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_batch_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_batch_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _finish("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_batch_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", a.data * b.data, (a, b), backward)


def scale(x: Tensor, s: "float | Tensor") -> Tensor:
    """
    Multiply by a scalar constant or a single-element tensor.

    Args:
        x (Tensor): Input.
        s (float | Tensor): Scalar factor; a tensor factor receives a gradient.

    Returns:
        Tensor: `s * x`.
    """
    x = _as_tensor(x)
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ShapeError(f"scale: factor must be a scalar, got shape {s.shape}")
        factor = s.data.reshape(())

        def backward(g):
            return g * factor, np.asarray(np.sum(g * x.data)).reshape(s.shape).astype(s.dtype)

        return _finish("scale", x.data * factor, (x, s), backward)

    value = float(s)

    def backward_const(g):
        return (g * value,)

    return _finish("scale", x.data * x.dtype.type(value), (x,), backward_const)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    `b` is either a 2-D weight shared across `a`'s leading dimensions or has the
    same leading dimensions as `a`.

    Raises:
        ShapeError: If the inner dimensions or leading dimensions disagree.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:

        def backward(g):
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return grad_a, grad_b

    elif a.shape[:-2] == b.shape[:-2]:

        def backward(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    else:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _finish("matmul", a.data @ b.data, (a, b), backward)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """
    Softmax over the last axis.

    Args:
        x (Tensor): Scores.
        mask (np.ndarray | None, optional): Boolean array, True where a position
            may receive probability; its shape matches `x` or a trailing part.

    Returns:
        Tensor: Row-stochastic probabilities; masked entries are exactly 0.
    """
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape[z.ndim - mask.ndim :]:
            raise ShapeError(f"softmax: mask shape {mask.shape} does not fit {z.shape}")
        z = np.where(mask, z, -np.inf)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _finish("softmax", y, (x,), backward)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: weight {weight.shape} does not fit input {x.shape}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    n = x.data * r

    def backward(g):
        gn = g * weight.data
        gx = r * (gn - n * np.mean(gn * n, axis=-1, keepdims=True))
        return gx, _unbroadcast(g * n, weight.shape)

    return _finish("rms_norm", n * weight.data, (x, weight), backward)


def _logistic(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = _logistic(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _finish("sigmoid", y, (x,), backward)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _logistic(x.data)

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _finish("silu", x.data * s, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    ndim = xs[0].ndim
    axis = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or x.shape[:axis] + x.shape[axis + 1 :] != (
            xs[0].shape[:axis] + xs[0].shape[axis + 1 :]
        ):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape}")
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    x = _as_tensor(x)
    axis = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice_axis: [{start}, {stop}) out of range for shape {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _finish("slice", x.data[index], (x,), backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """
    Gather entries along an axis.

    Raises:
        IndexError: If an index is outside the axis.
    """
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    axis = axis % x.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise IndexError(f"take: index out of range for axis of size {x.shape[axis]}")

    def backward(g):
        grad = np.zeros_like(x.data)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return _finish("take", np.take(x.data, idx, axis=axis), (x,), backward)


def index_add(base: Tensor, indices, values: Tensor) -> Tensor:
    """
    Return `base` with `values` added to the rows named by `indices`.

    Args:
        base (Tensor): Tensor of shape [n, ...].
        indices: Distinct row indices.
        values (Tensor): Tensor of shape [len(indices), ...].

    Raises:
        ShapeError: If values are not row-aligned with the indices.
        IndexError: If an index is outside `base`.
    """
    base, values = _as_tensor(base), _as_tensor(values)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if values.shape != (idx.size, *base.shape[1:]):
        raise ShapeError(
            f"index_add: values {values.shape} not aligned with {idx.size} rows of {base.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise IndexError(f"index_add: row index out of range for {base.shape[0]} rows")
    if np.unique(idx).size != idx.size:
        raise ValueError("index_add: indices must be distinct")
    out = base.data.copy()
    out[idx] += values.data

    def backward(g):
        return g, g[idx]

    return _finish("index_add", out, (base, values), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _finish("transpose", np.transpose(x.data, axes), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return _finish("reshape", out, (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """
    Look up rows of an embedding table.

    Raises:
        ValueError: If a token id is outside [0, V).
    """
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ValueError(f"token id out of range for vocabulary of size {vocab}: {idx.max()}")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _finish("embedding", table.data[idx], (table,), backward)


def cross_entropy(
    logits: Tensor, targets, weights: np.ndarray | None = None
) -> Tensor:
    """
    Mean cross-entropy (nats) of integer targets under row logits.

    Args:
        logits (Tensor): Shape [N, V].
        targets: N integer class ids.
        weights (np.ndarray | None, optional): Per-row weights; the loss is
            the weighted mean. Zero-weight rows are ignored.

    Returns:
        Tensor: Scalar loss.

    Raises:
        ShapeError: If logits are not 2-D or targets disagree in length.
        ValueError: If a target is out of range or all weights are zero.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != t.size:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    n, vocab = logits.shape
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise ValueError(f"cross_entropy: target out of range for {vocab} classes")
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no rows carry weight")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = -(w * log_probs[rows, t]).sum() / total

    def backward(g):
        probs = np.exp(log_probs)
        probs[rows, t] -= 1.0
        return (probs * (w / total)[:, None] * g,)

    return _finish("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _finish("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size

    def backward(g):
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _finish("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate((-x[..., half:], x[..., :half]), axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """
    Rotary position rotation `x * cos + rotate_half(x) * sin`.

    Args:
        x (Tensor): Shape [T, H, d]; d even.
        cos (np.ndarray): Shape [T, 1, d].
        sin (np.ndarray): Shape [T, 1, d].
    """
    x = _as_tensor(x)
    if x.shape[-1] % 2 or cos.shape != (x.shape[0], 1, x.shape[-1]):
        raise ShapeError(f"rope: tables {cos.shape} do not fit input {x.shape}")

    def backward(g):
        return (g * cos - _rotate_half(g * sin),)

    out = (x.data * cos + _rotate_half(x.data) * sin).astype(x.dtype)
    return _finish("rope", out, (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Return a constant copy; nothing upstream of `x` receives gradient through it."""
    return Tensor(x.data, dtype=x.dtype, name=x.name)
