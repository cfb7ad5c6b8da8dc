"""Dense float tensors with tape-based reverse-mode differentiation.

Tensors wrap a numpy array in the active working precision (float32 unless
inside :func:`float64_mode`). Operations in :mod:`gancnn.ops` record a node on
the active :class:`AutodiffTape` when any input requires a gradient; with no
tape active they run as plain numpy code.
"""
from __future__ import annotations

import contextlib
import contextvars
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import ContractError, InvalidShapeError, ShapeError, TapeConsumedError

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("gancnn_dtype", default=np.float32)
_TAPE: contextvars.ContextVar = contextvars.ContextVar("gancnn_tape", default=None)


def working_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def float64_mode():
    """Run the enclosed code in 64-bit precision (used by gradient checks)."""
    token = _DTYPE.set(np.float64)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, copy=False):
        arr = np.array(data, dtype=_DTYPE.get(), copy=copy) if copy else np.asarray(data, dtype=_DTYPE.get())
        if arr.ndim and 0 in arr.shape:
            raise InvalidShapeError(f"tensor with empty dimension {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, copy=True)


@dataclass
class Node:
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class AutodiffTape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs were
    produced by earlier nodes (or are leaves). A tape can be differentiated
    exactly once.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False
    _token: object = field(default=None, repr=False)

    def __enter__(self):
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, output, inputs, backward_fn):
        if self.consumed:
            raise TapeConsumedError("cannot record on a tape that was already differentiated")
        self.nodes.append(Node(output, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor):
        if self.consumed:
            raise TapeConsumedError("backward() already ran on this tape")
        if loss.data.ndim != 0:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        touched = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    touched[key] = inp
            node.output.grad = g
        for key, g in grads.items():
            touched[key].grad = g
        # leaves that never received a gradient are independent of the loss
        for node in self.nodes:
            for inp in node.inputs:
                if isinstance(inp, Tensor) and inp.requires_grad and inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)


def active_tape():
    return _TAPE.get()


def backward(loss: Tensor, tape: AutodiffTape):
    tape.backward(loss)


def record(out_data, inputs, backward_fn) -> Tensor:
    """Wrap a forward result and register its backward rule on the active tape."""
    out = Tensor(out_data)
    tape = _TAPE.get()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def randn_seeded(shape, seed) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShapeError(f"invalid shape {shape}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape))


# Tensor dump: little-endian u32 rank, u32 dims, then raw float32 values.

def write_tensor(fh: BinaryIO, data):
    arr = np.ascontiguousarray(data.data if isinstance(data, Tensor) else data, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise ShapeError("truncated tensor dump header")
    (rank,) = struct.unpack("<I", head)
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(dims))
    payload = fh.read(4 * n)
    if len(payload) != 4 * n:
        raise ShapeError(f"truncated tensor payload: expected {4 * n} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, data):
    with open(path, "wb") as fh:
        write_tensor(fh, data)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
