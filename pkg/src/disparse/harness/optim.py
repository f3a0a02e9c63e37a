from __future__ import annotations

from typing import Sequence

import numpy as np

from ..autograd import Tensor


class Adam:
    """Adam over a fixed list of named parameters.

    Moments are kept per parameter; :meth:`reset` clears them at given flat
    indices (used when connections are pruned or regrown).
    """

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {lid: np.zeros(p.shape) for lid, p in self.params}
        self.v = {lid: np.zeros(p.shape) for lid, p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for lid, p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[lid], self.v[lid]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def reset(self, layer_id: str, flat_idx: np.ndarray) -> None:
        self.m[layer_id].reshape(-1)[flat_idx] = 0.0
        self.v[layer_id].reshape(-1)[flat_idx] = 0.0


def step_decay(base_lr: float, iteration: int, factor: float, every: int) -> float:
    """``base_lr * factor ** (iteration // every)``; ``every <= 0`` disables decay."""
    if every <= 0:
        return base_lr
    return base_lr * factor ** (iteration // every)
