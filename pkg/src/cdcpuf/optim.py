import numpy as np


class Adam:
    """Adam over a list of numpy parameter arrays, updated in place."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def bce_from_logits(z, r):
    """Mean binary cross-entropy of targets ``r`` under ``sigmoid(z)``, overflow-safe."""
    return float(np.mean(np.logaddexp(0.0, z) - r * z))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def default_batch_size(k, train_size, floor=32):
    """``10**(k-1)`` with a floor of ``floor`` for k <= 2, clamped to ``[1, train_size]``."""
    size = 10 ** (k - 1)
    if k <= 2:
        size = max(size, floor)
    return max(1, min(size, train_size))
