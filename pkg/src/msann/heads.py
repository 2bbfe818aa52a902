"""Label classifier, label-quantity regressor, and their losses."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .nn import Linear, Module

FULL_REGRESSOR_HIDDEN = (512, 256)
DESK_REGRESSOR_HIDDEN = (32, 16)


class ClassifierHead(Module):
    def __init__(self, in_features, num_classes, rng):
        self.fc = Linear(in_features, num_classes, rng)

    @property
    def in_features(self):
        return self.fc.in_features

    @property
    def num_classes(self):
        return self.fc.out_features

    def forward(self, f):
        return self.fc(f)


class _DropoutMLP(Module):
    def __init__(self, in_features, hidden, out_features, rng, rate=0.5, seed=0):
        self.hidden = []
        width = in_features
        for h in hidden:
            self.hidden.append(Linear(width, h, rng))
            width = h
        self.out = Linear(width, out_features, rng)
        self.rate = rate
        self._rng = np.random.default_rng(seed)

    @property
    def in_features(self):
        return self.hidden[0].in_features if self.hidden else self.out.in_features

    def reseed(self, seed):
        self._rng = np.random.default_rng(seed)

    def forward(self, f):
        x = f
        for layer in self.hidden:
            x = T.dropout(T.relu(layer(x)), self.rate, self.training, self._rng)
        return self.out(x)


class QuantityRegressor(_DropoutMLP):
    """MLP with dropout on every hidden layer and a single real output."""

    def __init__(self, in_features, rng, hidden=DESK_REGRESSOR_HIDDEN, rate=0.5, seed=0):
        super().__init__(in_features, hidden, 1, rng, rate, seed)


class QuantityClassifier(_DropoutMLP):
    """Same body as the regressor, softmax over quantities ``1..max_quantity``."""

    def __init__(self, in_features, max_quantity, rng, hidden=DESK_REGRESSOR_HIDDEN, rate=0.5, seed=0):
        super().__init__(in_features, hidden, max_quantity, rng, rate, seed)
        self.max_quantity = max_quantity


def _check_in(head, f):
    if f.ndim != 2 or f.shape[1] != head.in_features:
        raise DimensionError(f"feature {f.shape} does not match head input width {head.in_features}")


def classify(head, f):
    """Return ``(logits, probabilities)``."""
    _check_in(head, f)
    z = head(f)
    return z, T.sigmoid(z)


def cls_loss(logits, y, mean=False):
    """Summed sigmoid cross entropy over images and classes, taken on logits."""
    return T.sigmoid_cross_entropy(logits, y, reduction="mean" if mean else "sum")


def cls_loss_probs(p, y):
    """The same loss evaluated directly on probabilities (reference form)."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"probabilities {p.shape} vs labels {y.shape}")
    if np.any(p <= 0) or np.any(p >= 1):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    return float(np.sum(y * -np.log(p) + (1 - y) * -np.log(1 - p)))


def quantity_regress(reg, f):
    """Raw, unclamped quantity predictions of shape [N]."""
    _check_in(reg, f)
    out = reg(f)
    return out.reshape(out.shape[0])


def reg_loss(m_hat, m, mean=False):
    """Summed squared error between predicted and true quantities."""
    m = np.asarray(m, dtype=np.float64)
    if m_hat.shape != m.shape:
        raise DimensionError(f"predictions {m_hat.shape} vs targets {m.shape}")
    diff = m_hat - T.Tensor(m)
    loss = (diff * diff).sum()
    return loss * (1.0 / len(m)) if mean else loss


def quantity_classify_baseline(head, f):
    """Return ``(logits, probabilities, predicted quantity)``; categories are 1..max."""
    _check_in(head, f)
    z = head(f)
    probs = T.softmax_np(z.data)
    return z, probs, np.argmax(probs, axis=1) + 1


def quantity_cls_loss(logits, m, max_quantity, mean=False):
    m = np.asarray(m, dtype=np.int64)
    if np.any(m < 1) or np.any(m > max_quantity):
        raise ContractError(f"quantities must lie in [1, {max_quantity}], got range [{m.min()}, {m.max()}]")
    return T.softmax_cross_entropy(logits, m - 1, reduction="mean" if mean else "sum")
