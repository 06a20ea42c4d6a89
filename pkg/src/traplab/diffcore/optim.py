"""SGD-with-momentum and Adam for the tensor core.

Steps never touch gradients; the caller resets them (``zero_grad``).
Accumulator buffers always match their parameter shapes.
"""

from __future__ import annotations

import numpy as np

from .tensor import DiffError, NonFiniteError

__all__ = ["Optimizer", "SGD", "Adam", "make_optimizer"]


class Optimizer:
    kind = "base"

    def __init__(self, params, lr, weight_decay=0.0):
        if lr <= 0:
            raise DiffError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise DiffError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def _gradients(self):
        grads = []
        for p in self.params:
            if p.grad is None:
                raise DiffError("optimizer step with a missing gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            grads.append(g)
        return grads

    @staticmethod
    def _apply(param, delta):
        if not np.all(np.isfinite(delta)):
            raise NonFiniteError("non-finite optimizer update")
        param.data -= delta

    def step(self):
        raise NotImplementedError

    def state_dict(self):
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd-momentum"

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        if not 0.0 <= momentum < 1.0:
            raise DiffError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.buffers = [None] * len(self.params)

    def step(self):
        for i, (p, g) in enumerate(zip(self.params, self._gradients())):
            if self.momentum:
                if self.buffers[i] is None:
                    self.buffers[i] = g.copy()
                else:
                    self.buffers[i] = self.momentum * self.buffers[i] + g
                g = self.buffers[i]
            self._apply(p, self.lr * g)

    def state_dict(self):
        return {
            "kind": self.kind,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "buffers": [None if b is None else b.copy() for b in self.buffers],
        }


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise DiffError(f"betas must be in [0, 1), got {betas}")
        self.betas = (b1, b2)
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        b1, b2 = self.betas
        self.t += 1
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for i, (p, g) in enumerate(zip(self.params, self._gradients())):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            self._apply(p, self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def state_dict(self):
        return {
            "kind": self.kind,
            "lr": self.lr,
            "betas": self.betas,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.t,
        }


def make_optimizer(kind, params, **hyper):
    if kind == "sgd-momentum":
        return SGD(params, **hyper)
    if kind == "adam":
        return Adam(params, **hyper)
    raise DiffError(f"unknown optimizer kind {kind!r}")
