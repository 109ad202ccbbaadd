"""First-order optimizers operating in place on Tensor leaves."""

import numpy as np

from .errors import ContractViolation


class SGD:
    def __init__(self, params, lr):
        if lr <= 0:
            raise ContractViolation("lr must be positive")
        self.params = list(params)
        self.lr = lr

    def step(self, grads=None):
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        if len(grads) != len(self.params):
            raise ContractViolation("grads length does not match params")
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ContractViolation(f"grad shape {g.shape} != param shape {p.data.shape}")
            p.data -= self.lr * g


class Adam:
    """Adam with bias correction. beta defaults are the usual ones; the
    training recipes only pin the learning rates."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ContractViolation("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads=None):
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        if len(grads) != len(self.params):
            raise ContractViolation("grads length does not match params")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ContractViolation(f"grad shape {g.shape} != param shape {p.data.shape}")
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
