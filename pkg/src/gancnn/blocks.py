"""Declarative layer stacks for the generator, discriminator and 3-D classifier.

A :class:`ModelGraph` is a list of :class:`LayerSpec` plus an input shape.
Shapes and parameter counts are derived from the specs alone, so the
full-size architectures can be inspected without allocating their weights;
:meth:`ModelGraph.init_params` materializes them on demand.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ContractError, ShapeError
from .seeding import derive_seed
from .tensor import Tensor, parameter, read_tensor, write_tensor

KINDS = {
    "dense", "batchnorm", "leaky_relu", "relu", "reshape", "conv2d", "conv2d_transpose",
    "conv3d", "maxpool3d", "dropout", "flatten", "softmax", "sigmoid", "tanh",
}
ACTIVATIONS = {"leaky_relu", "relu", "softmax", "sigmoid", "tanh"}
_REQUIRED = {
    "dense": ("units",),
    "conv2d": ("filters", "kernel"),
    "conv2d_transpose": ("filters", "kernel"),
    "conv3d": ("filters", "kernel"),
    "reshape": ("target_shape",),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None
    filters: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: str = "valid"
    alpha: float = 0.2
    rate: float = 0.3
    window: int = 2
    target_shape: tuple | None = None
    has_bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        for name in _REQUIRED.get(self.kind, ()):
            if getattr(self, name) is None:
                raise ContractError(f"{self.kind} layer needs {name}")
        for name in ("units", "filters", "kernel"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ContractError(f"{name} must be positive, got {value}")
        if self.padding not in ("same", "valid"):
            raise ContractError(f"unknown padding {self.padding!r}")
        if self.stride < 1 or self.window < 1:
            raise ContractError("stride and window must be positive")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ContractError(f"dropout rate must lie in [0, 1), got {self.rate}")


def Dense(units, bias=True):
    return LayerSpec("dense", units=units, has_bias=bias)


def BatchNorm():
    return LayerSpec("batchnorm")


def LeakyReLU(alpha=0.2):
    return LayerSpec("leaky_relu", alpha=alpha)


def Activation(kind):
    return LayerSpec(kind)


def Reshape(*target_shape):
    return LayerSpec("reshape", target_shape=tuple(target_shape))


def Conv2D(filters, kernel, stride=1, padding="valid", bias=True):
    return LayerSpec("conv2d", filters=filters, kernel=kernel, stride=stride, padding=padding, has_bias=bias)


def Conv2DTranspose(filters, kernel, stride=2, bias=False):
    return LayerSpec("conv2d_transpose", filters=filters, kernel=kernel, stride=stride, has_bias=bias)


def Conv3D(filters, kernel=3, bias=True):
    return LayerSpec("conv3d", filters=filters, kernel=kernel, has_bias=bias)


def MaxPool3D(window=2):
    return LayerSpec("maxpool3d", window=window)


def Dropout(rate=0.3):
    return LayerSpec("dropout", rate=rate)


def Flatten():
    return LayerSpec("flatten")


@dataclass(frozen=True)
class ParamCountConvention:
    # 4 per channel (gamma, beta, moving mean, moving variance) when true
    batchnorm_counts_running_stats: bool = True


@dataclass(frozen=True)
class ParamCounts:
    per_layer: tuple
    total: int


def _out_shape(spec: LayerSpec, shape: tuple, index: int) -> tuple:
    def need_rank(r):
        if len(shape) != r:
            raise ShapeError(f"{spec.kind} expects rank-{r} input, got {shape}", index)

    k = spec.kind
    if k == "dense":
        need_rank(1)
        return (spec.units,)
    if k == "conv2d":
        need_rank(3)
        h, w, _ = shape
        if spec.padding == "same":
            return (-(-h // spec.stride), -(-w // spec.stride), spec.filters)
        if h < spec.kernel or w < spec.kernel:
            raise ShapeError(f"input {shape} smaller than kernel {spec.kernel}", index)
        return ((h - spec.kernel) // spec.stride + 1, (w - spec.kernel) // spec.stride + 1, spec.filters)
    if k == "conv2d_transpose":
        need_rank(3)
        return (shape[0] * spec.stride, shape[1] * spec.stride, spec.filters)
    if k == "conv3d":
        need_rank(4)
        dims = tuple(n - spec.kernel + 1 for n in shape[:3])
        if min(dims) < 1:
            raise ShapeError(f"input {shape} smaller than kernel {spec.kernel}", index)
        return dims + (spec.filters,)
    if k == "maxpool3d":
        need_rank(4)
        if min(shape[:3]) < spec.window:
            raise ShapeError(f"pool window {spec.window} exceeds spatial dims {shape[:3]}", index)
        return tuple(n // spec.window for n in shape[:3]) + (shape[3],)
    if k == "flatten":
        return (math.prod(shape),)
    if k == "reshape":
        if math.prod(spec.target_shape) != math.prod(shape):
            raise ShapeError(f"cannot reshape {shape} to {spec.target_shape}", index)
        return tuple(spec.target_shape)
    return shape


def _param_shapes(spec: LayerSpec, in_shape: tuple) -> dict:
    k = spec.kind
    shapes = {}
    if k == "dense":
        shapes["kernel"] = (in_shape[-1], spec.units)
    elif k in ("conv2d", "conv2d_transpose"):
        shapes["kernel"] = (spec.kernel, spec.kernel, in_shape[-1], spec.filters)
    elif k == "conv3d":
        shapes["kernel"] = (spec.kernel,) * 3 + (in_shape[-1], spec.filters)
    elif k == "batchnorm":
        c = in_shape[-1]
        return {"gamma": (c,), "beta": (c,), "moving_mean": (c,), "moving_variance": (c,)}
    if shapes and spec.has_bias:
        shapes["bias"] = (spec.units if k == "dense" else spec.filters,)
    return shapes


def _truncated_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


@dataclass
class ModelGraph:
    kind: str
    input_shape: tuple
    layers: list
    params: list | None = None
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5
    training: bool = False
    meta: dict = field(default_factory=dict)

    def infer_shapes(self, input_shape=None):
        return infer_shapes(self, self.input_shape if input_shape is None else input_shape)

    @property
    def output_shape(self):
        shapes = self.infer_shapes()
        return shapes[-1] if shapes else tuple(self.input_shape)

    def count_params(self, convention=ParamCountConvention()):
        return count_params(self, convention)

    def param_shapes(self):
        shapes, cur = [], tuple(self.input_shape)
        for spec, out in zip(self.layers, self.infer_shapes()):
            shapes.append(_param_shapes(spec, cur))
            cur = out
        return shapes

    def init_params(self, seed, std=0.02):
        """Allocate parameters: truncated-normal weights, zero biases, unit gamma."""
        params = []
        for i, shapes in enumerate(self.param_shapes()):
            layer = {}
            for name, shape in shapes.items():
                if name == "kernel":
                    rng = np.random.default_rng(derive_seed(seed, self.kind, i, name))
                    value = _truncated_normal(rng, shape, std)
                elif name in ("gamma", "moving_variance"):
                    value = np.ones(shape)
                else:
                    value = np.zeros(shape)
                t = parameter(value, name=f"{i}.{name}")
                if name.startswith("moving_"):
                    t.requires_grad = False
                layer[name] = t
            params.append(layer)
        self.params = params
        return self

    def trainable(self):
        if self.params is None:
            raise ContractError("model parameters have not been initialized")
        return [t for layer in self.params for t in layer.values() if t.requires_grad]

    def forward(self, x, training=None, seed=0, logits=False):
        """Run the stack on a batched input ``[batch, *input_shape]``.

        With ``logits=True`` a trailing sigmoid/softmax is skipped so the loss
        can be computed in a numerically stable fused form.
        """
        if self.params is None:
            raise ContractError("model parameters have not been initialized")
        if training is None:
            training = self.training
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"{self.kind} expects input {tuple(self.input_shape)}, got {tuple(x.shape[1:])}")
        layers = self.layers
        if logits and layers and layers[-1].kind in ("sigmoid", "softmax"):
            layers = layers[:-1]
        for i, (spec, p) in enumerate(zip(layers, self.params)):
            x = _apply_layer(spec, p, x, training, derive_seed(seed, i) if spec.kind == "dropout" else 0, self)
        return x

    __call__ = forward


def _apply_layer(spec, p, x, training, seed, model):
    k = spec.kind
    if k == "dense":
        return ops.dense(x, p["kernel"], p.get("bias"))
    if k == "conv2d":
        return ops.conv2d(x, p["kernel"], spec.stride, spec.padding, p.get("bias"))
    if k == "conv2d_transpose":
        return ops.conv2d_transpose(x, p["kernel"], spec.stride, p.get("bias"))
    if k == "conv3d":
        return ops.conv3d(x, p["kernel"], p.get("bias"))
    if k == "maxpool3d":
        return ops.maxpool3d(x, spec.window)
    if k == "batchnorm":
        return ops.batchnorm(x, p["gamma"], p["beta"], p["moving_mean"], p["moving_variance"],
                             model.bn_momentum, model.bn_epsilon, training)
    if k == "dropout":
        return ops.dropout(x, spec.rate, training, seed)
    if k == "flatten":
        return ops.flatten(x)
    if k == "reshape":
        return ops.reshape(x, (x.shape[0],) + tuple(spec.target_shape))
    return ops.apply_activation(x, k, spec.alpha)


def infer_shapes(model: ModelGraph, input_shape) -> list:
    """Per-layer output shapes (batch axis excluded).

    Raises :class:`ShapeError` whose ``layer_index`` is the 1-based position
    of the first layer that cannot accept its input.
    """
    shapes, cur = [], tuple(input_shape)
    for i, spec in enumerate(model.layers, start=1):
        cur = _out_shape(spec, cur, i)
        shapes.append(cur)
    return shapes


def count_params(model: ModelGraph, convention=ParamCountConvention()) -> ParamCounts:
    counts = []
    for spec, shapes in zip(model.layers, model.param_shapes()):
        if spec.kind == "batchnorm" and not convention.batchnorm_counts_running_stats:
            shapes = {n: s for n, s in shapes.items() if not n.startswith("moving_")}
        counts.append(sum(math.prod(s) for s in shapes.values()))
    return ParamCounts(tuple(counts), sum(counts))


# -- the three architectures -------------------------------------------------

def build_generator(noise_dim=500, image_size=64, dense_units=1024, channels=(256, 64), kernel=5, alpha=0.2):
    """Noise -> dense -> two stride-2 transposed convs -> tanh image in [-1, 1]."""
    if image_size % 4:
        raise ContractError(f"image_size must be divisible by 4, got {image_size}")
    base = image_size // 4
    layers = [
        Dense(dense_units, bias=False),
        BatchNorm(),
        LeakyReLU(alpha),
        Dense(base * base * channels[0]),
        LeakyReLU(alpha),
        Reshape(base, base, channels[0]),
        Conv2DTranspose(channels[1], kernel, 2),
        BatchNorm(),
        LeakyReLU(alpha),
        Conv2DTranspose(1, kernel, 2),
        Activation("tanh"),
    ]
    return ModelGraph("generator", (noise_dim,), layers, meta={"noise_dim": noise_dim, "image_size": image_size})


def build_discriminator(image_size=64, filters=(64, 128), dense_units=64, kernel=5, alpha=0.2, rate=0.3):
    layers = [
        Conv2D(filters[0], kernel, 2, "same"),
        LeakyReLU(alpha),
        Dropout(rate),
        Conv2D(filters[1], kernel, 2, "same"),
        LeakyReLU(alpha),
        Dropout(rate),
        Flatten(),
        Dense(dense_units),
        Dense(dense_units),
        Dense(1),
        Activation("sigmoid"),
    ]
    return ModelGraph("discriminator", (image_size, image_size, 1), layers, meta={"image_size": image_size})


def build_classifier(input_shape=(32, 32, 22, 1), filters=64, dense_units=(1024, 256), conv_blocks=3,
                     activation="relu", n_classes=2):
    layers = []
    for block in range(conv_blocks):
        layers += [Conv3D(filters), Activation(activation)]
        if block < conv_blocks - 1:
            layers += [MaxPool3D(), BatchNorm()]
    layers.append(Flatten())
    for units in dense_units:
        layers += [Dense(units), Activation(activation)]
    layers += [Dense(n_classes), Activation("softmax")]
    return ModelGraph("classifier", tuple(input_shape), layers)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"GCNNCKPT"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: ModelGraph) -> bytes:
    if model.params is None:
        raise ContractError("cannot checkpoint a model without parameters")
    buf = io.BytesIO()
    tag = model.kind.encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(tag)))
    buf.write(tag)
    buf.write(struct.pack("<I", len(model.params)))
    for layer in model.params:
        buf.write(struct.pack("<I", len(layer)))
        for name, t in layer.items():
            raw = name.encode()
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            write_tensor(buf, t.data)
    return buf.getvalue()


def save_checkpoint(model: ModelGraph, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path_or_bytes, model: ModelGraph) -> ModelGraph:
    """Fill ``model`` (built with the same architecture) from a checkpoint."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        fh = io.BytesIO(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            fh = io.BytesIO(f.read())
    if fh.read(8) != CHECKPOINT_MAGIC:
        raise ContractError("not a model checkpoint")
    version, taglen = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    tag = fh.read(taglen).decode()
    if tag != model.kind:
        raise ContractError(f"checkpoint holds a {tag}, expected {model.kind}")
    (n_layers,) = struct.unpack("<I", fh.read(4))
    if n_layers != len(model.layers):
        raise ContractError(f"checkpoint has {n_layers} layers, model has {len(model.layers)}")
    expected = model.param_shapes()
    params = []
    for i in range(n_layers):
        (n,) = struct.unpack("<I", fh.read(4))
        layer = {}
        for _ in range(n):
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode()
            arr = read_tensor(fh)
            if expected[i].get(name) != arr.shape:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {expected[i].get(name)}", i + 1)
            t = parameter(arr, name=f"{i}.{name}")
            t.requires_grad = not name.startswith("moving_")
            layer[name] = t
        params.append(layer)
    model.params = params
    return model
