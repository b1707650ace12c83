import math
from typing import Iterable, Sequence

import numpy as np

from ..enums import Schedule
from ..numerics.tensor import Tensor


class Adam:
    """
    Adam with decoupled weight decay.

    Tensors listed in `no_decay` (the processor gates) are never decayed.
    The optimizer only reads `.grad` and writes `.data`.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        no_decay: Iterable[Tensor] = (),
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = {id(p) for p in no_decay}
        self.steps = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        beta1, beta2 = self.betas
        self.steps += 1
        correction1 = 1.0 - beta1**self.steps
        correction2 = 1.0 - beta2**self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            if self.weight_decay and id(p) not in self.no_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.dtype)


def learning_rate(
    step: int, total_steps: int, base_lr: float, schedule: Schedule, warmup_ratio: float = 0.05
) -> float:
    """
    Learning rate for a 0-based optimizer step.

    `warmup-cosine` rises linearly over the first `warmup_ratio` of steps and
    then decays along a half cosine to 0.
    """
    if schedule == Schedule.CONSTANT or total_steps <= 0:
        return base_lr
    warmup = max(1, int(round(warmup_ratio * total_steps))) if warmup_ratio > 0 else 0
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
