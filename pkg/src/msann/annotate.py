"""Turning class probabilities into label sets.

Strategies: ``lqp`` (top round(m_hat)), ``topk:K``, ``threshold:P``,
``lqp-cls`` (top argmax of the quantity classifier) and ``gt`` (top true
quantity; evaluation-only upper bound).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .metrics import quantize_quantity


@dataclass(frozen=True)
class Strategy:
    kind: str
    value: float | None = None

    def __str__(self):
        if self.kind == "topk":
            return f"topk:{int(self.value)}"
        if self.kind == "threshold":
            return f"threshold:{self.value:g}"
        return self.kind


def parse_strategy(text):
    text = str(text).strip()
    kind, _, arg = text.partition(":")
    kind = {"lqp_classification": "lqp-cls", "ground_truth_quantity": "gt"}.get(kind, kind)
    try:
        if kind == "topk":
            k = int(arg)
            if k < 1:
                raise ConfigError("top-k needs k >= 1")
            return Strategy("topk", k)
        if kind == "threshold":
            p = float(arg)
            if not 0.0 < p < 1.0:
                raise ConfigError("threshold must lie in (0, 1)")
            return Strategy("threshold", p)
    except ValueError as exc:
        raise ConfigError(f"bad strategy {text!r}") from exc
    if kind in ("lqp", "lqp-cls", "gt") and not arg:
        return Strategy(kind)
    raise ConfigError(f"unknown strategy {text!r}; use lqp, topk:K, threshold:P, lqp-cls or gt")


def ranking(probs):
    """Class indices by descending probability, ties by ascending index."""
    probs = np.asarray(probs)
    return np.argsort(-probs, axis=-1, kind="stable")


def tie_break(probs, quantity):
    """The ``quantity`` best classes of one probability vector, as a frozenset."""
    return frozenset(int(j) for j in ranking(probs)[: max(0, int(quantity))])


@dataclass
class AnnotationResult:
    ranked: np.ndarray  # [N, C]
    quantities: np.ndarray  # [N] number of labels selected
    labels: list  # per-image frozenset
    m_hat: np.ndarray | None
    strategy: str


def quantities_for(strategy, probs, m_hat=None, quantity_cls=None, truth_m=None, max_quantity=None):
    n, C = probs.shape
    if strategy.kind == "topk":
        return np.full(n, min(int(strategy.value), C), dtype=np.int64)
    if strategy.kind == "threshold":
        return (probs >= strategy.value).sum(axis=1)
    if strategy.kind == "lqp":
        if m_hat is None:
            raise ContractError("lqp strategy needs quantity predictions")
        return quantize_quantity(m_hat, max_quantity or C)
    if strategy.kind == "lqp-cls":
        if quantity_cls is None:
            raise ContractError("lqp-cls strategy needs quantity-classifier predictions")
        return np.minimum(np.asarray(quantity_cls, dtype=np.int64), C)
    if strategy.kind == "gt":
        if truth_m is None:
            raise ContractError("ground-truth quantity strategy requires ground truth")
        return np.asarray(truth_m, dtype=np.int64)
    raise ConfigError(f"unknown strategy {strategy}")


def annotate(probs, strategy, m_hat=None, quantity_cls=None, truth_m=None, max_quantity=None):
    """Select a label set per image from a [N, C] probability matrix."""
    if isinstance(strategy, str):
        strategy = parse_strategy(strategy)
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    ranked = ranking(probs)
    q = quantities_for(strategy, probs, m_hat, quantity_cls, truth_m, max_quantity)
    if strategy.kind == "threshold":
        labels = [frozenset(int(j) for j in np.flatnonzero(row >= strategy.value)) for row in probs]
    else:
        labels = [frozenset(int(j) for j in ranked[i, : q[i]]) for i in range(len(probs))]
    return AnnotationResult(ranked, q, labels, None if m_hat is None else np.asarray(m_hat), str(strategy))


def selection_matrix(result, num_classes):
    mat = np.zeros((len(result.labels), num_classes), dtype=np.int64)
    for i, labels in enumerate(result.labels):
        mat[i, list(labels)] = 1
    return mat
