"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import AutodiffTape, float64_mode


def numerical_grad(fn, inputs, index, eps=1e-5):
    x = inputs[index].data
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        up = float(fn(*inputs).data)
        x[i] = orig - eps
        down = float(fn(*inputs).data)
        x[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn, inputs, eps=1e-5):
    """Return the worst relative error over every input that requires a gradient.

    ``fn`` maps the input tensors to a scalar tensor. Must be called under
    :func:`float64_mode`.
    """
    with AutodiffTape() as tape:
        loss = fn(*inputs)
    tape.backward(loss)
    worst = 0.0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        num = numerical_grad(fn, inputs, k, eps)
        worst = max(worst, max_relative_error(t.grad, num))
    return worst


def probe(out, weights):
    """Scalar functional ``sum(out * weights)`` used to check a non-scalar op."""
    return ops.sum(ops.mul(out, weights))


__all__ = ["check_gradients", "numerical_grad", "max_relative_error", "probe", "float64_mode"]
