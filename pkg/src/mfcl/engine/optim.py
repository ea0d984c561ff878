"""In-place optimizers over named parameter dicts."""
from __future__ import annotations

import numpy as np


class Optimizer:
    def __init__(self, lr):
        if not lr > 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        self.lr = lr
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def _check(self, params, grads):
        for key, g in grads.items():
            if key not in params:
                raise KeyError(f"gradient for unknown parameter {key!r}")
            if params[key].shape != g.shape:
                raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {params[key].shape}")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        """Update ``params`` in place; parameters without a gradient are skipped."""
        raise NotImplementedError


class SGDMomentum(Optimizer):
    """``v <- m*v + g; p <- p - lr*v``."""

    kind = "sgd-momentum"

    def __init__(self, lr=0.01, momentum=0.9):
        super().__init__(lr)
        self.momentum = momentum

    def step(self, params, grads):
        self._check(params, grads)
        for key, g in grads.items():
            st = self.state.setdefault(key, {"v": np.zeros_like(params[key])})
            st["v"] = self.momentum * st["v"] + g
            params[key] -= self.lr * st["v"]
        return params


class Adam(Optimizer):
    kind = "adaptive-moments"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, params, grads):
        self._check(params, grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for key, g in grads.items():
            st = self.state.setdefault(
                key, {"m": np.zeros_like(params[key]), "v": np.zeros_like(params[key])})
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            params[key] -= self.lr * (st["m"] / c1) / (np.sqrt(st["v"] / c2) + self.eps)
        return params


def make_optimizer(kind: str, **kwargs) -> Optimizer:
    if kind == SGDMomentum.kind:
        return SGDMomentum(**kwargs)
    if kind == Adam.kind:
        return Adam(**kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")
