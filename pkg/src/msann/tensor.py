"""Dense float64 tensors with a dynamic tape for reverse-mode differentiation.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient (and grad mode is on) the result remembers its parents and a
closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks that tape in reverse topological order and
accumulates into the ``grad`` of every leaf that requires it.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, UninitializedStatisticsError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (inference, feature caching)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient {grad.shape} vs tensor {self.shape}")
        if not self.requires_grad:
            return

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic ----------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return self * (1.0 / other)

    def __pow__(self, exponent):
        x = self

        def backward(g):
            return (g * exponent * x.data ** (exponent - 1),)

        return Tensor._make(x.data**exponent, (x,), backward)

    def __matmul__(self, other):
        a, b = self, _as_tensor(other)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul of {a.shape} and {b.shape}")

        def backward(g):
            return g @ b.data.T, a.data.T @ g

        return Tensor._make(a.data @ b.data, (a, b), backward)

    # -- reductions and reshaping --------------------------------------
    def sum(self, axis=None, keepdims=False):
        x = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    def __getitem__(self, index):
        x = self

        def backward(g):
            out = np.zeros_like(x.data)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._make(x.data[index], (x,), backward)


class Parameter(Tensor):
    """A trainable leaf tensor.  ``name`` is filled in by the owning module."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# ----------------------------------------------------------------------
# elementwise and dense ops
# ----------------------------------------------------------------------
def add(a, b):
    """Elementwise sum of two equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def relu(x):
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid_np(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` laid out as [in, out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias
    return out


def concat(a, b):
    """Concatenate two [N, D] tensors along the feature axis."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat: shapes {a.shape} and {b.shape} disagree on leading dimension")
    da = a.shape[1]

    def backward(g):
        return g[:, :da], g[:, da:]

    return Tensor._make(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def dropout(x, rate, training, rng):
    """Inverted dropout; identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------------
# convolution and pooling
# ----------------------------------------------------------------------
def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of [N,C,H,W] input with [K,C,kh,kw] filters."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride}, padding {padding}")
    n, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias {bias.shape} vs weight {weight.shape}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N, C, Ho, Wo, kh, kw
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, backward)


def _check_pool(x, window, stride):
    if x.ndim != 4:
        raise DimensionError(f"pooling expects [N,C,H,W], got {x.shape}")
    if stride < 1 or window < 1:
        raise ContractError(f"pooling: window {window}, stride {stride}")
    if window > x.shape[2] or window > x.shape[3]:
        raise DimensionError(f"pooling window {window} exceeds spatial extent {x.shape[2:]}")


def max_pool2d(x, window, stride=None):
    stride = window if stride is None else stride
    _check_pool(x, window, stride)
    n, c, h, w = x.shape
    ho = conv_output_size(h, window, stride, 0)
    wo = conv_output_size(w, window, stride, 0)
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        return (gx,)

    return Tensor._make(out, (x,), backward)


def avg_pool2d(x, window, stride=None):
    stride = window if stride is None else stride
    _check_pool(x, window, stride)
    ho = conv_output_size(x.shape[2], window, stride, 0)
    wo = conv_output_size(x.shape[3], window, stride, 0)
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(4, 5))
    scale = 1.0 / (window * window)

    def backward(g):
        gx = np.zeros(x.shape)
        for i in range(window):
            for j in range(window):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * scale
        return (gx,)

    return Tensor._make(out, (x,), backward)


def global_avg_pool(x):
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return Tensor._make(x.data.mean(axis=(2, 3)), (x,), backward)


# ----------------------------------------------------------------------
# batch normalization
# ----------------------------------------------------------------------
class RunningStats:
    """Exponential moving averages of per-channel mean and variance.

    The first update copies the batch statistics; later ones blend with
    ``decay`` weight on the old value.
    """

    def __init__(self, channels):
        self.channels = channels
        self.mean = None
        self.var = None
        self.updates = 0

    @property
    def initialized(self):
        return self.mean is not None

    def update(self, mean, var, decay):
        if self.mean is None:
            self.mean, self.var = mean.copy(), var.copy()
        else:
            self.mean = decay * self.mean + (1.0 - decay) * mean
            self.var = decay * self.var + (1.0 - decay) * var
        self.updates += 1


def batch_norm(x, gamma, beta, stats, training, decay=0.9997, eps=1e-5):
    """Per-channel normalization of [N,C,...] input.

    Training mode normalizes with the biased batch variance and folds the
    batch statistics into ``stats``; eval mode uses ``stats`` and fails if
    they were never populated.
    """
    if eps <= 0:
        raise ContractError("batch_norm epsilon must be positive")
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    count = x.data.size // x.shape[1]

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.update(mu, var, decay)
    else:
        if not stats.initialized:
            raise UninitializedStatisticsError("batch_norm in eval mode before any running-stat update")
        mu, var = stats.mean, stats.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (
                inv_std.reshape(bshape)
                / count
                * (
                    count * dxhat
                    - dxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------------
# fused losses
# ----------------------------------------------------------------------
def sigmoid_cross_entropy(logits, targets, reduction="sum"):
    """Binary cross entropy evaluated on logits.

    ``max(z, 0) - z*y + log(1 + exp(-|z|))`` equals
    ``-y log σ(z) - (1-y) log(1-σ(z))`` without overflow.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"targets {y.shape} vs logits {logits.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    scale = 1.0 if reduction == "sum" else 1.0 / z.shape[0]
    p = _sigmoid_np(z)

    def backward(g):
        return (g * scale * (p - y),)

    return Tensor._make(per.sum() * scale, (logits,), backward)


def log_softmax_np(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_np(z):
    return np.exp(log_softmax_np(z))


def softmax_cross_entropy(logits, target_index, reduction="sum"):
    """Categorical cross entropy against integer targets in ``[0, classes)``."""
    idx = np.asarray(target_index, dtype=np.int64)
    if logits.ndim != 2 or idx.shape != (logits.shape[0],):
        raise DimensionError(f"targets {idx.shape} vs logits {logits.shape}")
    logp = log_softmax_np(logits.data)
    rows = np.arange(len(idx))
    scale = 1.0 if reduction == "sum" else 1.0 / len(idx)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, idx] -= 1.0
        return (g * scale * grad,)

    return Tensor._make(-logp[rows, idx].sum() * scale, (logits,), backward)
