from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blocks import ModelGraph, build_classifier
from .errors import ConfigError, ContractError, ShapeError
from .optim import AdamState, adam_step
from .seeding import derive_seed
from .tensor import AutodiffTape, Tensor
from .volume import SliceStack, resize_stack

CLASSES = ("normal", "bipolar")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}


@dataclass(eq=False)
class LabeledSample:
    grid: np.ndarray  # [h, w, depth]
    label: str
    provenance: str = "real"
    sample_id: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.label not in CLASS_INDEX:
            raise ContractError(f"sample label must be one of {CLASSES}, got {self.label!r}")
        if self.provenance not in ("real", "generated"):
            raise ContractError(f"sample provenance must be real or generated, got {self.provenance!r}")
        if self.grid.ndim != 3:
            raise ShapeError(f"sample grid must be [h, w, depth], got {self.grid.shape}")
        if self.grid.min() < -1 or self.grid.max() > 1:
            raise ContractError(f"sample {self.sample_id!r} has values outside [-1, 1]")


def to_sample(stack: SliceStack, size=None) -> LabeledSample:
    """Classifier sample from a slice stack, 2x2-pooling slices down to ``size``.

    Stacks from phantoms (provenance ``synthetic``) stand in for real scans.
    """
    while size is not None and stack.shape[1] > size:
        stack = resize_stack(stack)
    if size is not None and stack.shape[1:] != (size, size):
        raise ShapeError(f"cannot bring {stack.shape[1:]} slices to {size}x{size}")
    provenance = "generated" if stack.provenance == "generated" else "real"
    return LabeledSample(stack.to_grid(), stack.label, provenance, stack.sample_id)


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    filters: int = 64
    dense_units: tuple = (1024, 256)
    conv_blocks: int = 3
    init_std: float = 0.02

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")

    def build(self, input_shape) -> ModelGraph:
        return build_classifier(tuple(input_shape) + (1,), self.filters, tuple(self.dense_units), self.conv_blocks)


def _batch(samples):
    return np.stack([s.grid for s in samples])[..., None]


def _batches(order, size):
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    # batch norm needs two samples per batch
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def train_classifier(train, config: ClassifierTrainConfig = ClassifierTrainConfig()) -> ModelGraph:
    """Fit the 3-D CNN with softmax cross-entropy and Adam; returns it in inference mode."""
    train = list(train)
    present = {s.label for s in train}
    if present != set(CLASSES):
        raise ContractError(f"training set must contain both classes, found {sorted(present)}")
    if len(train) < 2:
        raise ContractError("need at least two training samples")
    shapes = {s.grid.shape for s in train}
    if len(shapes) != 1:
        raise ShapeError(f"training grids have mixed shapes {sorted(shapes)}")
    model = config.build(shapes.pop()).init_params(derive_seed(config.seed, "classifier-init"), config.init_std)
    params = model.trainable()
    opt = AdamState(config.learning_rate, config.beta1, config.beta2)
    x_all = _batch(train)
    y_all = np.array([CLASS_INDEX[s.label] for s in train])
    rng = np.random.default_rng(derive_seed(config.seed, "classifier-order"))
    history = []
    for _ in range(config.epochs):
        total = 0.0
        for idx in _batches(rng.permutation(len(train)), config.batch_size):
            with AutodiffTape() as tape:
                logits = model(Tensor(x_all[idx]), training=True, logits=True)
                loss = ops.softmax_cross_entropy(logits, y_all[idx])
            tape.backward(loss)
            adam_step(params, [p.grad for p in params], opt)
            total += loss.item() * len(idx)
        history.append(total / len(train))
    model.training = False
    model.meta["loss_history"] = history
    return model


@dataclass(frozen=True)
class Prediction:
    p_normal: float
    p_bipolar: float

    @property
    def label(self):
        return "bipolar" if self.p_bipolar > self.p_normal else "normal"


def predict_proba(model: ModelGraph, grids, chunk=32) -> np.ndarray:
    """``[n, 2]`` class probabilities (columns follow ``CLASSES``)."""
    grids = np.asarray(grids, dtype=np.float32)
    expected = tuple(model.input_shape[:-1])
    if grids.ndim != 4 or grids.shape[1:] != expected:
        raise ShapeError(f"expected grids shaped {expected}, got {grids.shape[1:]}")
    out = [model(Tensor(grids[i:i + chunk, ..., None]), training=False).data for i in range(0, len(grids), chunk)]
    return np.concatenate(out).astype(np.float64)


def predict(model: ModelGraph, grid) -> Prediction:
    grid = np.asarray(grid)
    if grid.shape != tuple(model.input_shape[:-1]):
        raise ShapeError(f"expected a grid shaped {tuple(model.input_shape[:-1])}, got {grid.shape}")
    p = predict_proba(model, grid[None])[0]
    return Prediction(float(p[0]), float(p[1]))


def accuracy(model, samples) -> float:
    p = predict_proba(model, [s.grid for s in samples])
    y = np.array([CLASS_INDEX[s.label] for s in samples])
    return float((p.argmax(axis=1) == y).mean())


# -- cross-validation --------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    assignments: dict = field(default_factory=dict)  # sample_id -> fold

    def validate_ids(self, fold):
        return [sid for sid, f in self.assignments.items() if f == fold]

    def split(self, samples, fold):
        """(train, validate) for one fold; samples unknown to the plan go to train."""
        train, val = [], []
        for s in samples:
            (val if self.assignments.get(s.sample_id) == fold else train).append(s)
        return train, val

    def sizes(self):
        return [sum(1 for f in self.assignments.values() if f == i) for i in range(self.k)]


def make_folds(samples, k=5, seed=0) -> FoldPlan:
    """Stratified, seeded k-fold partition of real samples.

    Classes are dealt round-robin into folds in a fixed class order, each
    class continuing where the previous one stopped, so both total and
    per-class fold sizes differ by at most one.
    """
    samples = list(samples)
    if k < 2:
        raise ContractError(f"k must be at least 2, got {k}")
    if any(s.provenance != "real" for s in samples):
        raise ContractError("generated samples must never enter validation folds")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ContractError("sample ids must be unique")
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    plan = FoldPlan(k)
    cursor = 0
    for label in CLASSES:
        members = sorted(s.sample_id for s in samples if s.label == label)
        if not members:
            continue
        if len(members) < k:
            raise ContractError(f"class {label!r} has {len(members)} samples, fewer than k={k}")
        for sid in (members[i] for i in rng.permutation(len(members))):
            plan.assignments[sid] = cursor % k
            cursor += 1
    return plan
