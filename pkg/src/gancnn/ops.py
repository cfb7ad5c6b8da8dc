"""Differentiable primitives. All layouts are channels-last."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, InvalidRateError, ShapeError
from .tensor import Tensor, as_tensor, record, working_dtype


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=working_dtype())


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum(x):  # noqa: A001 - mirrors numpy naming
    return record(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    n = x.size
    return record(np.mean(x.data), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def reshape(x, shape):
    shape = tuple(shape)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- convolution kernels ----------------------------------------------------

def _gather(xp, kshape, stride):
    """Strided patches of a padded input: [b, out..., c, k...]."""
    nd = len(kshape)
    win = sliding_window_view(xp, kshape, axis=tuple(range(1, nd + 1)))
    return win[(slice(None),) + (slice(None, None, stride),) * nd]


def _scatter(cols, full_shape, stride):
    """Adjoint of :func:`_gather`: cols [b, out..., k..., c] summed into full_shape."""
    nd = len(full_shape) - 2
    out_dims = cols.shape[1:nd + 1]
    kshape = cols.shape[nd + 1:2 * nd + 1]
    full = np.zeros(full_shape, dtype=cols.dtype)
    lead = (slice(None),) * (nd + 1)
    for offset in np.ndindex(*kshape):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_dims))
        full[(slice(None),) + sl] += cols[lead + offset]
    return full


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _crop(full, pads):
    sl = tuple(slice(lo, full.shape[i + 1] - hi) for i, (lo, hi) in enumerate(pads))
    return full[(slice(None),) + sl]


def _conv_nd(x, kernel, stride, pads, bias):
    nd = kernel.data.ndim - 2
    if x.data.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d expects a rank-{nd + 2} input, got {x.shape}")
    if x.shape[-1] != kernel.shape[nd]:
        raise ShapeError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {kernel.shape[nd]}")
    kshape = kernel.shape[:nd]
    for size, k, (lo, hi) in zip(x.shape[1:-1], kshape, pads):
        if size + lo + hi < k:
            raise ShapeError(f"input {x.shape} smaller than kernel {kernel.shape}")
    xp = np.pad(x.data, [(0, 0)] + list(pads) + [(0, 0)])
    win = _gather(xp, kshape, stride)
    win_axes = [nd + 1] + list(range(nd + 2, 2 * nd + 2))
    k_axes = [nd] + list(range(nd))
    out = np.tensordot(win, kernel.data, axes=(win_axes, k_axes))
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gcols = np.tensordot(g, kernel.data, axes=([nd + 1], [nd + 1]))
        gx = _crop(_scatter(gcols, xp.shape, stride), pads)
        gk = np.moveaxis(np.tensordot(win, g, axes=(list(range(nd + 1)), list(range(nd + 1)))), 0, nd)
        gb = g.sum(axis=tuple(range(nd + 1))) if bias is not None else None
        return gx, gk, gb

    return record(out, (x, kernel, bias), backward)


def conv2d(x, kernel, stride=1, padding="valid", bias=None):
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [kh, kw, c_in, c_out], got {kernel.shape}")
    if padding == "same":
        pads = [_same_pads(n, k, stride) for n, k in zip(x.shape[1:3], kernel.shape[:2])]
    else:
        pads = [(0, 0), (0, 0)]
    return _conv_nd(x, kernel, stride, pads, bias)


def conv3d(x, kernel, bias=None):
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d kernel must be [k, k, k, c_in, c_out], got {kernel.shape}")
    return _conv_nd(x, kernel, 1, [(0, 0)] * 3, bias)


def conv2d_transpose(x, kernel, stride=2, bias=None):
    """Upsampling convolution whose spatial output is exactly ``input * stride``.

    Kernel layout is [kh, kw, c_in, c_out]. This is the adjoint of a "same"
    padded strided :func:`conv2d`.
    """
    nd = 2
    if kernel.data.ndim != 4 or x.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ShapeError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {kernel.shape[2]}")
    kshape = kernel.shape[:2]
    if any(k < stride for k in kshape):
        raise ShapeError(f"kernel {kshape} smaller than stride {stride}")
    in_dims = x.shape[1:3]
    full_shape = (x.shape[0],) + tuple((n - 1) * stride + k for n, k in zip(in_dims, kshape)) + (kernel.shape[3],)
    pads = [((k - stride) // 2, k - stride - (k - stride) // 2) for k in kshape]
    cols = np.tensordot(x.data, kernel.data, axes=([nd + 1], [nd]))
    out = _crop(_scatter(cols, full_shape, stride), pads)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gp = np.pad(g, [(0, 0)] + pads + [(0, 0)])
        win = _gather(gp, kshape, stride)
        gx = np.tensordot(win, kernel.data, axes=([nd + 1, nd + 2, nd + 3], [3, 0, 1]))
        gk = np.tensordot(x.data, win, axes=([0, 1, 2], [0, 1, 2]))  # [c_in, c_out, kh, kw]
        gk = gk.transpose(2, 3, 0, 1)
        gb = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return gx, gk, gb

    return record(out, (x, kernel, bias), backward)


def maxpool3d(x, window=2):
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d expects [batch, h, w, d, c], got {x.shape}")
    b, h, w, d, c = x.shape
    if min(h, w, d) < window:
        raise ShapeError(f"maxpool3d window {window} exceeds spatial dims {(h, w, d)}")
    p = window
    h2, w2, d2 = h // p, w // p, d // p
    blocks = (x.data[:, :h2 * p, :w2 * p, :d2 * p]
              .reshape(b, h2, p, w2, p, d2, p, c)
              .transpose(0, 1, 3, 5, 7, 2, 4, 6)
              .reshape(b, h2, w2, d2, c, p ** 3))
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = (gb.reshape(b, h2, w2, d2, c, p, p, p)
                .transpose(0, 1, 5, 2, 6, 3, 7, 4)
                .reshape(b, h2 * p, w2 * p, d2 * p, c))
        gx = np.zeros_like(x.data)
        gx[:, :h2 * p, :w2 * p, :d2 * p] = gb
        return (gx,)

    return record(out, (x,), backward)


# -- normalization ----------------------------------------------------------

def batchnorm(x, gamma, beta, running_mean, running_var, momentum=0.9, epsilon=1e-5, training=False):
    """Per-channel normalization over every axis except the last.

    In training mode the running statistics are updated in place by an
    exponential moving average: ``running = momentum * running + (1 - momentum) * batch``.
    """
    axes = tuple(range(x.data.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batch normalization in training mode needs a batch of at least 2")
        n = math.prod(x.shape[:-1])
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data[...] = momentum * running_mean.data + (1 - momentum) * mu
        running_var.data[...] = momentum * running_var.data + (1 - momentum) * var
    else:
        mu, var = running_mean.data, running_var.data
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta, None, None

    return record(out, (x, gamma, beta, running_mean, running_var), backward)


# -- activations ------------------------------------------------------------

def relu(x):
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, alpha=0.2):
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.data.dtype)
    return record(x.data * slope, (x,), lambda g: (g * slope,))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0, -z))


def sigmoid(x):
    y = _sigmoid(x.data)
    return record(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x):
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1 - y * y),))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    y = _softmax(x.data)
    return record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def apply_activation(x, kind, alpha=0.2):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x, rate, training=True, seed=0):
    """Inverted dropout; survivors are scaled by ``1 / (1 - rate)``."""
    if not 0 <= rate < 1:
        raise InvalidRateError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.data.dtype)
    return record(x.data * scale, (x,), lambda g: (g * scale,))


# -- losses -----------------------------------------------------------------

def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against targets in [0, 1]."""
    z = logits.data
    t = np.broadcast_to(_data(targets), z.shape)
    loss = np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))
    n = z.size
    return record(loss, (logits,), lambda g: (g * (_sigmoid(z) - t) / n,))


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy; ``labels`` holds integer class indices."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} incompatible with labels {labels.shape}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (g * d / z.shape[0],)

    return record(loss, (logits,), backward)
