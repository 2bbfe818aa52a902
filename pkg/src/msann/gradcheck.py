"""Central finite-difference checks of the tape gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


def numeric_grad(fn, arrays, index, h=1e-5):
    """d fn / d arrays[index] by central differences; ``fn`` returns a float."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn(*base)
        flat[k] = orig - h
        down = fn(*base)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return grad


def check(op, arrays, seed=0, h=1e-5, wrt=None):
    """Max elementwise ``|analytic - numeric| / max(1, |numeric|)`` per input.

    ``op`` maps Tensors to a Tensor; it is reduced to a scalar through a
    fixed random projection so every output element is exercised.
    """
    rng = np.random.default_rng(seed)
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = rng.normal(size=out.shape)
    (out * proj).sum().backward()

    def scalar(*raw):
        with T.no_grad():
            return float((op(*[Tensor(r) for r in raw]).data * proj).sum())

    errors = []
    for i in wrt:
        num = numeric_grad(scalar, arrays, i, h)
        ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(num)
        errors.append(float(np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(num)))))
    return errors


@dataclass
class GradCase:
    name: str
    op: object
    make: object  # rng -> list of arrays


def _bn(train):
    def op(x, g, b):
        stats = RunningStats(x.shape[1])
        if not train:
            stats.update(np.full(x.shape[1], 0.1), np.full(x.shape[1], 1.7), 0.0)
        return T.batch_norm(x, g, b, stats, training=train)

    return op


def default_cases():
    """Every differentiable primitive on tensors of at most 64 elements."""
    n = np.random.default_rng
    return [
        GradCase("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
                 lambda r: [r.normal(size=(1, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
        GradCase("conv2d_1x1", lambda x, w, b: T.conv2d(x, w, b),
                 lambda r: [r.normal(size=(2, 3, 3, 3)), r.normal(size=(2, 3, 1, 1)), r.normal(size=2)]),
        GradCase("max_pool2d", lambda x: T.max_pool2d(x, 2, 2), lambda r: [r.normal(size=(2, 2, 4, 4))]),
        GradCase("avg_pool2d", lambda x: T.avg_pool2d(x, 2, 1), lambda r: [r.normal(size=(2, 2, 4, 4))]),
        GradCase("global_avg_pool", T.global_avg_pool, lambda r: [r.normal(size=(2, 3, 3, 3))]),
        GradCase("batch_norm_train", _bn(True),
                 lambda r: [r.normal(size=(4, 3, 2, 2)), r.normal(size=3), r.normal(size=3)]),
        GradCase("batch_norm_eval", _bn(False),
                 lambda r: [r.normal(size=(4, 3, 2, 2)), r.normal(size=3), r.normal(size=3)]),
        GradCase("relu", T.relu, lambda r: [r.normal(size=(4, 8))]),
        GradCase("sigmoid", T.sigmoid, lambda r: [r.normal(size=(4, 8)) * 3]),
        GradCase("linear", T.linear, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 5)), r.normal(size=5)]),
        GradCase("concat", T.concat, lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 4))]),
        GradCase("add", T.add, lambda r: [r.normal(size=(2, 3, 2, 2)), r.normal(size=(2, 3, 2, 2))]),
        GradCase("mul", lambda a, b: a * b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        GradCase("dropout", lambda x: T.dropout(x, 0.5, True, n(7)), lambda r: [r.normal(size=(4, 8))]),
        GradCase("square_sum", lambda x: (x * x).sum(), lambda r: [r.normal(size=7)]),
        GradCase("sigmoid_cross_entropy",
                 lambda z: T.sigmoid_cross_entropy(z, (np.arange(12).reshape(3, 4) % 3 == 0)),
                 lambda r: [r.normal(size=(3, 4)) * 2]),
        GradCase("softmax_cross_entropy", lambda z: T.softmax_cross_entropy(z, [0, 2, 1]),
                 lambda r: [r.normal(size=(3, 4))]),
    ]


def run_suite(seeds=range(20), h=1e-5, cases=None):
    """Return ``{case name: worst relative error over seeds and inputs}``."""
    results = {}
    for case in cases or default_cases():
        worst = 0.0
        for seed in seeds:
            arrays = case.make(np.random.default_rng(seed))
            worst = max(worst, *check(case.op, arrays, seed=seed, h=h))
        results[case.name] = worst
    return results
