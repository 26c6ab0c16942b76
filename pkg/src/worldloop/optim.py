"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .autodiff import MissingGradError, Tensor


class AdamW:
    """Standard AdamW: adaptive moments plus decoupled weight decay.

    The update reads gradients but never mutates them; the caller resets
    with ``zero_grad``. ``step_count`` increases by exactly one per
    ``step()``.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"adamw: parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update

    def zero_grad(self):
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            else:
                p.grad[...] = 0.0
