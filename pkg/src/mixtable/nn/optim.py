from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError


def cosine_lr(step, total_steps, lr0):
    """Cosine decay from ``lr0`` at step 0 to 0 at ``total_steps``."""
    if lr0 < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr0}")
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    frac = min(max(step, 0), total_steps) / total_steps
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, store, grads, lr):
        if lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {lr}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, param in store.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr == 0:
                continue
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            param.data -= (lr * update).astype(param.dtype, copy=False)


def adam_step(store, grads, lr, state=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional form; pass the returned state back in on the next call."""
    state = state if state is not None else Adam(beta1, beta2, eps)
    state.step(store, grads, lr)
    return state
