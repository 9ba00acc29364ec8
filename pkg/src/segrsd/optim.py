"""Minimal SGD and Adam over lists of dense layers.

Gradients arrive as (d_weights, d_bias) tuples aligned with the layer list;
frozen layers (mask False) are skipped entirely so their parameters and any
optimizer state stay bit-identical.
"""
from __future__ import annotations

import numpy as np


class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, layers, grads, mask, lr_multipliers=None):
        for i, layer in enumerate(layers):
            if not mask[i] or grads[i] is None:
                continue
            lr = self.learning_rate * (lr_multipliers[i] if lr_multipliers else 1.0)
            layer.weights -= lr * grads[i][0]
            layer.bias -= lr * grads[i][1]


class Adam:
    def __init__(self, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._state: dict[int, list[np.ndarray]] = {}

    def _update(self, moments, grad, lr):
        m, v = moments
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, layers, grads, mask, lr_multipliers=None):
        self.t += 1
        for i, layer in enumerate(layers):
            if not mask[i] or grads[i] is None:
                continue
            if i not in self._state:
                self._state[i] = [
                    np.zeros_like(layer.weights), np.zeros_like(layer.weights),
                    np.zeros_like(layer.bias), np.zeros_like(layer.bias),
                ]
            st = self._state[i]
            lr = self.learning_rate * (lr_multipliers[i] if lr_multipliers else 1.0)
            layer.weights -= self._update(st[0:2], grads[i][0], lr)
            layer.bias -= self._update(st[2:4], grads[i][1], lr)


def make_optimizer(config):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    if config.optimizer == "sgd":
        return Sgd(config.learning_rate)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")
