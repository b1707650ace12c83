"""
Dense tensors with a recording tape for reverse-mode differentiation.

A `Tensor` wraps a contiguous numpy buffer. Primitive ops in `ops.py` record a
`Node` on the active `Tape` whenever any input requires a gradient; outside a
`with Tape()` block nothing is recorded. `backward` replays the tape in reverse.
Tapes and tensors belong to a single worker.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from ..core.config import settings

_default_dtype: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "default_dtype", default=np.dtype(settings.default_dtype)
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return _default_dtype.get()


@contextlib.contextmanager
def use_dtype(dtype: str | type | np.dtype) -> Iterator[np.dtype]:
    """
    Switch the default float precision for tensors created inside the block.

    Args:
        dtype (str | type | np.dtype): `float32` or `float64`.

    Yields:
        np.dtype: The active dtype.

    Raises:
        ValueError: If the dtype is not a supported float type.
    """
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported dtype: {resolved}")
    token = _default_dtype.set(resolved)
    try:
        yield resolved
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """
    Dense n-dimensional float array.

    Attributes:
        data (np.ndarray): The values, contiguous, float32 or float64.
        requires_grad (bool): Whether gradients flow into this tensor.
        grad (np.ndarray | None): Accumulated gradient, same shape as data.
        name (str | None): Optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype: str | type | np.dtype | None = None,
        name: str | None = None,
    ):
        target = np.dtype(dtype) if dtype is not None else get_default_dtype()
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=target)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, "
            f"requires_grad={self.requires_grad})"
        )

    # Operator sugar over the primitive set.
    def __add__(self, other: "Tensor") -> "Tensor":
        from .ops import add

        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from .ops import sub

        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        from .ops import mul, scale

        if isinstance(other, Tensor) and other.data.size != 1:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from .ops import scale

        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from .ops import matmul

        return matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    """A recorded primitive application."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    tape: "Tape | None" = None
    index: int = -1


@dataclass(eq=False)
class Tape:
    """
    Ordered record of primitive applications.

    Recording order is a topological order: an output is created only after all
    of its inputs exist. A tape runs `backward` once; `reset` clears it.

    Usage:
        ```
        with Tape() as tape:
            loss = f(params)
            tape.backward(loss)
        ```
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False
    _tokens: list[contextvars.Token] = field(default_factory=list, repr=False)

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("Tape already ran backward; call reset() before recording")
        node.tape = self
        node.index = len(self.nodes)
        self.nodes.append(node)
        node.output._node = node

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
        """
        Populate `.grad` of every leaf that requires a gradient.

        Gradients accumulate into existing `.grad` buffers, so the backward of a
        sum of losses equals the sum of separate backwards.

        Args:
            loss (Tensor): A scalar tensor recorded on this tape.
            leaves (Iterable[Tensor], optional): Extra leaves that must receive a
                gradient buffer even when the loss does not depend on them.

        Raises:
            ShapeError: If the loss is not a scalar.
            TapeError: If the tape already ran backward or the loss is not on it.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward called twice on the same tape without reset()")
        node = loss._node
        if node is None or node.tape is not self:
            raise TapeError("loss is not connected to this tape")
        self.consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen_leaves: dict[int, Tensor] = {}
        for current in reversed(self.nodes[: node.index + 1]):
            for tensor in current.inputs:
                if tensor.requires_grad and tensor.is_leaf:
                    seen_leaves[id(tensor)] = tensor
            upstream = pending.pop(id(current.output), None)
            if upstream is None:
                continue
            grads = current.backward(upstream)
            for tensor, grad in zip(current.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(
                        f"{current.op} backward produced {grad.shape} for input {tensor.shape}"
                    )
                if tensor.is_leaf:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    pending[key] = pending[key] + grad if key in pending else grad
        for leaf in [*seen_leaves.values(), *leaves]:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def active_tape() -> "Tape | None":
    """
    Return the tape new nodes are recorded on.

    Ops only record inside a `with Tape()` block; outside one nothing is recorded.
    """
    return _active_tape.get()


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
    """
    Run reverse-mode differentiation from a scalar loss.

    Args:
        loss (Tensor): Scalar tensor connected to requires_grad leaves.
        leaves (Iterable[Tensor], optional): Leaves that must receive a gradient
            buffer (exact zeros when disconnected).

    Raises:
        ShapeError: If the loss is not a scalar.
        TapeError: If the loss was never recorded or its tape was consumed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.tape is None:
        raise TapeError("loss is not connected to any tape")
    node.tape.backward(loss, leaves)


def zero_grad(params: Iterable[Tensor]) -> None:
    for param in params:
        param.zero_grad()
