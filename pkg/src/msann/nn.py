"""Module containers and the handful of layers the model is built from."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, RunningStats

BN_EPS = 1e-5
BN_DECAY = 0.9997


def _walk(value, name, kind):
    if kind == "param" and isinstance(value, Parameter):
        value.name = name
        yield name, value
    elif kind == "buffer" and isinstance(value, RunningStats):
        yield name, value
    elif isinstance(value, Module):
        yield from value._named(kind, name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}", kind)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}", kind)


class Module:
    """Parameters are discovered by walking public attributes.

    Attribute names (and list indices / dict keys) build the dotted
    parameter name, e.g. ``fusion.3.phi1.conv.weight``.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _named(self, kind, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, prefix + key, kind)

    def named_parameters(self, prefix=""):
        return list(self._named("param", prefix))

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        return list(self._named("buffer", prefix))

    def modules(self):
        yield self
        stack = list(vars(self).items())
        while stack:
            key, value = stack.pop()
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                stack.extend((key, v) for v in value)
            elif isinstance(value, dict):
                stack.extend((key, v) for v in value.values())

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, decay=BN_DECAY, eps=BN_EPS):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.stats = RunningStats(channels)
        self.decay = decay
        self.eps = eps

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.stats, self.training, self.decay, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / in_features), (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    """Conv -> BN -> ReLU, the composite used by both scales and fusion blocks."""

    def __init__(self, in_channels, out_channels, kernel, stride, padding, rng, bn_decay=BN_DECAY):
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, padding, rng)
        self.bn = BatchNorm2d(out_channels, decay=bn_decay)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class MaxPoolBNReLU(Module):
    """MaxPool -> BN -> ReLU; stands in for a strided 3x3 conv composite."""

    def __init__(self, channels, window=2, stride=2, bn_decay=BN_DECAY):
        self.window = window
        self.stride = stride
        self.bn = BatchNorm2d(channels, decay=bn_decay)

    def forward(self, x):
        return T.relu(self.bn(T.max_pool2d(x, self.window, self.stride)))


def set_bn_decay(module, decay):
    for m in module.modules():
        if isinstance(m, BatchNorm2d):
            m.decay = decay
