"""Adam optimizer with decoupled weight decay."""
from __future__ import annotations

import numpy as np


class AdamW:
    """Per-parameter-name moment state; decay is decoupled from the update.

    A parameter with zero gradient and zero weight decay is left bit-exact
    unchanged. Moment buffers are keyed by parameter name so they survive
    snapshot reload; a buffer whose parameter grew (the id table does) is
    zero-padded to match.
    """

    def __init__(self, lr=5e-4, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def _moment(self, store, name, shape):
        buf = store.get(name)
        if buf is None or buf.shape != shape:
            fresh = np.zeros(shape)
            if buf is not None and buf.ndim == len(shape):
                keep = tuple(slice(0, min(a, b)) for a, b in zip(buf.shape, shape))
                fresh[keep] = buf[keep]
            store[name] = fresh
            buf = fresh
        return buf

    def step(self, params):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            g = p.grad
            m = self._moment(self.m, p.name, g.shape)
            v = self._moment(self.v, p.name, g.shape)
            if self.weight_decay != 0.0:
                p.value -= self.lr * self.weight_decay * p.value
            if not np.any(g):
                # zero gradient: moments decay but the update stays exactly 0
                if not np.any(m) and not np.any(v):
                    continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self, params):
        for p in params:
            p.zero_grad()
