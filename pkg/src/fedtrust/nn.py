"""Flat-parameter dense stacks with manual backprop, plus a tiny Adam.

Used by the gradient VAE, the Q-network and the trust heads. Hidden layers
use ReLU; the last layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DenseStack:
    def __init__(self, dims, dropout: float = 0.0):
        self.dims = list(dims)
        self.dropout = dropout
        self.shapes = []
        offset = 0
        for din, dout in zip(self.dims[:-1], self.dims[1:]):
            self.shapes.append((offset, din, dout))
            offset += din * dout + dout
        self.size = offset

    def init(self, rng) -> np.ndarray:
        theta = np.zeros(self.size)
        for off, din, dout in self.shapes:
            bound = np.sqrt(6.0 / din)
            theta[off:off + din * dout] = rng.uniform(-bound, bound, din * dout)
        return theta

    def layer(self, theta, i):
        off, din, dout = self.shapes[i]
        w = theta[off:off + din * dout].reshape(din, dout)
        b = theta[off + din * dout:off + din * dout + dout]
        return w, b

    def forward(self, theta, x, rng=None):
        """Returns ``(out, cache)``; dropout is active only when ``rng`` is given."""
        acts = [x]
        masks = []
        a = x
        last = len(self.shapes) - 1
        for i in range(len(self.shapes)):
            w, b = self.layer(theta, i)
            z = a @ w + b
            if i < last:
                mask = z > 0
                a = z * mask
                if rng is not None and self.dropout > 0:
                    keep = rng.random(a.shape) >= self.dropout
                    mask = mask * keep / (1.0 - self.dropout)
                    a = z * mask
                masks.append(mask)
            else:
                a = z
            acts.append(a)
        return a, (acts, masks)

    def backward(self, theta, cache, dout):
        """Gradient w.r.t. parameters and input, given upstream ``dout``."""
        acts, masks = cache
        grad = np.zeros(self.size)
        delta = dout
        for i in reversed(range(len(self.shapes))):
            off, din, dn = self.shapes[i]
            w, _ = self.layer(theta, i)
            grad[off:off + din * dn] = (acts[i].T @ delta).ravel()
            grad[off + din * dn:off + din * dn + dn] = delta.sum(axis=0)
            delta = delta @ w.T
            if i > 0:
                delta = delta * masks[i - 1]
        return grad, delta


@dataclass
class Adam:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
