"""SGD with momentum, L2 weight decay, and a step learning-rate schedule."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericalError


def weight_decay_coefficient(decay_rate, lr):
    """L2 coefficient under which a gradient-free plain step scales params by ``decay_rate``."""
    return (1.0 - decay_rate) / lr


def sgd_momentum_step(params, grads, velocities, lr, momentum, weight_decay):
    """One in-place update; ``velocities`` holds one array per parameter.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Nothing is modified when any gradient is non-finite.
    """
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            continue
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"parameter {getattr(p, 'name', '?')}: grad {g.shape} vs param {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in {getattr(p, 'name', '?')} ({bad} entries); step aborted")
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            continue
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data = p.data - lr * v


def step_lr(base_lr, step, decay_factor=0.1, interval=80_000):
    return base_lr * decay_factor ** (step // interval)


class SGD:
    """Stateful wrapper holding one velocity buffer per parameter."""

    def __init__(self, params, momentum=0.9, decay_rate=0.9997):
        self.params = list(params)
        self.momentum = momentum
        self.decay_rate = decay_rate
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        wd = weight_decay_coefficient(self.decay_rate, lr) if self.decay_rate < 1.0 else 0.0
        sgd_momentum_step(self.params, [p.grad for p in self.params], self.velocities, lr, self.momentum, wd)
