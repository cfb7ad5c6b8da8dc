"""Per-(class, depth) slice GANs and the bank that assembles them into stacks."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .blocks import ModelGraph, build_discriminator, build_generator, checkpoint_bytes
from .errors import ConfigError, ContractError, GanDivergenceError
from .optim import AdamState, adam_step
from .seeding import derive_seed
from .tensor import AutodiffTape, Tensor, randn_seeded
from .volume import SliceStack, write_pgm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GanTrainConfig:
    max_epochs: int = 20_000
    early_stop_epoch: int | None = 8_000
    batch_size: int = 16
    noise_dim: int = 500
    snapshot_epochs: tuple = (1, 50, 1000, 10_000)
    seed: int = 0
    image_size: int = 64
    gen_dense_units: int = 1024
    gen_channels: tuple = (256, 64)
    disc_filters: tuple = (64, 128)
    disc_dense_units: int = 64
    kernel: int = 5
    leaky_alpha: float = 0.2
    dropout_rate: float = 0.3
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    d_steps: int = 1
    g_steps: int = 1

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.early_stop_epoch is not None and not 1 <= self.early_stop_epoch <= self.max_epochs:
            raise ConfigError(f"early_stop_epoch {self.early_stop_epoch} outside [1, {self.max_epochs}]")
        bad = [e for e in self.snapshot_epochs if not 1 <= e <= self.max_epochs]
        if bad:
            raise ConfigError(f"snapshot epochs {bad} outside [1, {self.max_epochs}]")
        if self.batch_size < 1 or self.d_steps < 1 or self.g_steps < 1:
            raise ConfigError("batch_size, d_steps and g_steps must be positive")

    @property
    def epochs(self):
        return self.max_epochs if self.early_stop_epoch is None else min(self.max_epochs, self.early_stop_epoch)

    def generator(self) -> ModelGraph:
        return build_generator(self.noise_dim, self.image_size, self.gen_dense_units, tuple(self.gen_channels),
                               self.kernel, self.leaky_alpha)

    def discriminator(self) -> ModelGraph:
        return build_discriminator(self.image_size, tuple(self.disc_filters), self.disc_dense_units, self.kernel,
                                   self.leaky_alpha, self.dropout_rate)


@dataclass
class GanPair:
    generator: ModelGraph
    discriminator: ModelGraph
    class_tag: str
    depth_index: int
    seed: int
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)

    def fixed_noise(self):
        return randn_seeded((1, self.generator.input_shape[0]), derive_seed(self.seed, "fixed-noise"))

    def generate(self, noise) -> np.ndarray:
        """Inference-mode images ``[n, h, w]`` for a noise batch ``[n, noise_dim]``."""
        out = self.generator(noise, training=False)
        return out.data[..., 0]


def _as_batch(slices):
    return Tensor(slices[..., None])


def train_slice_gan(slices, config: GanTrainConfig, class_tag="unlabeled", depth_index=0) -> GanPair:
    """Adversarial training on one depth position of one class.

    Each epoch takes ``d_steps`` discriminator updates (real batch toward 1,
    fake batch toward 0) then ``g_steps`` generator updates with the
    non-saturating loss. Fixed-noise snapshots are kept at
    ``config.snapshot_epochs``.
    """
    slices = np.asarray(slices, dtype=np.float32)
    if slices.ndim != 3 or slices.shape[0] == 0:
        raise ContractError("need a non-empty [n, h, w] slice array")
    if slices.shape[0] < 2:
        raise ContractError(f"need at least 2 training slices, got {slices.shape[0]}")
    if slices.shape[1:] != (config.image_size, config.image_size):
        raise ContractError(f"slices are {slices.shape[1:]}, config expects {config.image_size}")
    if slices.min() < -1 or slices.max() > 1:
        raise ContractError("training slices must lie in [-1, 1]")

    seed = config.seed
    G = config.generator().init_params(derive_seed(seed, "generator"))
    D = config.discriminator().init_params(derive_seed(seed, "discriminator"))
    pair = GanPair(G, D, class_tag, depth_index, seed)
    g_params, d_params = G.trainable(), D.trainable()
    g_opt = AdamState(config.learning_rate, config.beta1, config.beta2)
    d_opt = AdamState(config.learning_rate, config.beta1, config.beta2)
    rng = np.random.default_rng(derive_seed(seed, "schedule"))
    fixed = pair.fixed_noise()
    n, b = slices.shape[0], config.batch_size
    snapshot_at = set(config.snapshot_epochs)

    for epoch in range(1, config.epochs + 1):
        for _ in range(config.d_steps):
            real = _as_batch(slices[rng.choice(n, b, replace=n < b)])
            fake = G(rng.standard_normal((b, config.noise_dim)), training=True)
            with AutodiffTape() as tape:
                d_seed = int(rng.integers(2**63))
                real_logits = D(real, training=True, seed=d_seed, logits=True)
                fake_logits = D(Tensor(fake.data), training=True, seed=d_seed + 1, logits=True)
                d_loss = ops.add(ops.bce_with_logits(real_logits, 1.0), ops.bce_with_logits(fake_logits, 0.0))
            tape.backward(d_loss)
            adam_step(d_params, [p.grad for p in d_params], d_opt)
        for _ in range(config.g_steps):
            with AutodiffTape() as tape:
                fake = G(rng.standard_normal((b, config.noise_dim)), training=True)
                logits = D(fake, training=True, seed=int(rng.integers(2**63)), logits=True)
                g_loss = ops.bce_with_logits(logits, 1.0)
            tape.backward(g_loss)
            adam_step(g_params, [p.grad for p in g_params], g_opt)
        gl, dl = g_loss.item(), d_loss.item()
        if not (math.isfinite(gl) and math.isfinite(dl)):
            raise GanDivergenceError(epoch, gl, dl)
        pair.loss_history.append((gl, dl))
        pair.epoch = epoch
        if epoch in snapshot_at:
            pair.snapshots[epoch] = pair.generate(fixed)[0]
    return pair


def discriminator_accuracy(pair: GanPair, real_slices, n=64, seed=0) -> float:
    """Fraction of a balanced real/fake batch the discriminator labels correctly."""
    rng = np.random.default_rng(seed)
    real_slices = np.asarray(real_slices, dtype=np.float32)
    real = real_slices[rng.choice(len(real_slices), n, replace=len(real_slices) < n)]
    fake = pair.generate(rng.standard_normal((n, pair.generator.input_shape[0])))
    p_real = pair.discriminator(_as_batch(real), training=False).data.ravel()
    p_fake = pair.discriminator(_as_batch(fake), training=False).data.ravel()
    return float(((p_real > 0.5).sum() + (p_fake <= 0.5).sum()) / (2 * n))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a, b = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return 0.0 if denom == 0 else float(a @ b) / denom


# -- bank ------------------------------------------------------------------

@dataclass
class GanBank:
    pairs: dict = field(default_factory=dict)  # (class_tag, depth_position) -> GanPair
    n_layers: int = 22
    depth_indices: tuple = ()

    def classes(self):
        return sorted({c for c, _ in self.pairs})

    def is_complete(self, class_tag) -> bool:
        return all((class_tag, d) in self.pairs for d in range(self.n_layers))

    def checkpoints(self):
        """``{(class, depth, role): bytes}`` for every trained network."""
        out = {}
        for (c, d), pair in sorted(self.pairs.items()):
            out[(c, d, "generator")] = checkpoint_bytes(pair.generator)
            out[(c, d, "discriminator")] = checkpoint_bytes(pair.discriminator)
        return out


def pair_seed(seed, class_tag, depth_index):
    return derive_seed(seed, "gan-pair", class_tag, depth_index)


def _train_job(args):
    slices, config, class_tag, depth = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        return train_slice_gan(slices, config, class_tag, depth)


def train_gan_bank(dataset, config: GanTrainConfig, jobs=1, classes=("bipolar", "normal")) -> GanBank:
    """Train one independent GAN per (class, depth position).

    ``dataset`` maps class tag to a list of equally deep :class:`SliceStack`.
    Each pair receives only its own slices and a seed derived from
    ``(config.seed, class, depth)``, so results do not depend on ``jobs``.
    """
    missing = [c for c in classes if not dataset.get(c)]
    if missing:
        raise ContractError(f"no training stacks for class(es) {missing}")
    depths = {s.shape[0] for c in classes for s in dataset[c]}
    if len(depths) != 1:
        raise ContractError(f"stacks have differing slice counts {sorted(depths)}")
    n_layers = depths.pop()
    for c in classes:
        if len(dataset[c]) < 2:
            raise ContractError(f"class {c!r} needs at least 2 stacks, got {len(dataset[c])}")

    tasks = []
    for c in classes:
        stacked = np.stack([s.slices for s in dataset[c]])  # [samples, depth, h, w]
        for d in range(n_layers):
            cfg = replace(config, seed=pair_seed(config.seed, c, d))
            tasks.append((np.ascontiguousarray(stacked[:, d]), cfg, c, d))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, tasks))
    else:
        results = [_train_job(t) for t in tasks]

    bank = GanBank(n_layers=n_layers, depth_indices=dataset[classes[0]][0].depth_indices)
    for pair in results:
        bank.pairs[(pair.class_tag, pair.depth_index)] = pair
    return bank


def synthesize_stacks(bank: GanBank, class_tag, seeds, sample_ids=None) -> list:
    """Generated stacks, one per seed; each depth position gets an independent noise draw.

    All stacks go through each generator as a single batch.
    """
    if not bank.is_complete(class_tag):
        raise ContractError(f"GAN bank is incomplete for class {class_tag!r}")
    seeds = list(seeds)
    sample_ids = list(sample_ids) if sample_ids is not None else [""] * len(seeds)
    if len(sample_ids) != len(seeds):
        raise ContractError("need one sample id per seed")
    if not seeds:
        return []
    per_depth = []
    for d in range(bank.n_layers):
        pair = bank.pairs[(class_tag, d)]
        z = np.concatenate([randn_seeded((1, pair.generator.input_shape[0]), derive_seed(seed, class_tag, d)).data
                            for seed in seeds])
        per_depth.append(pair.generate(z))
    volume = np.stack(per_depth, axis=1)  # [n, depth, h, w]
    depth_indices = bank.depth_indices or tuple(range(bank.n_layers))
    return [SliceStack(volume[i], depth_indices, class_tag, "generated", sid) for i, sid in enumerate(sample_ids)]


def synthesize_stack(bank: GanBank, class_tag, seed, sample_id="") -> SliceStack:
    """One generated stack: an independent noise draw per depth position."""
    return synthesize_stacks(bank, class_tag, [seed], [sample_id])[0]


# -- progress snapshots ------------------------------------------------------

def snapshot_name(class_tag, depth_index, epoch):
    return f"{class_tag}_d{depth_index:02d}_e{epoch:05d}.pgm"


def loss_log_name(class_tag, depth_index):
    return f"{class_tag}_d{depth_index:02d}_loss.csv"


def append_loss_log(pair: GanPair, out_dir) -> Path:
    """Append ``epoch,g_loss,d_loss`` lines not yet present in the pair's log."""
    path = Path(out_dir) / loss_log_name(pair.class_tag, pair.depth_index)
    done = 0
    if path.exists():
        with open(path) as fh:
            done = sum(1 for _ in fh)
    with open(path, "a") as fh:
        for epoch in range(done + 1, pair.epoch + 1):
            g, d = pair.loss_history[epoch - 1]
            fh.write(f"{epoch},{g:.6f},{d:.6f}\n")
    return path


def snapshot_progress(pair: GanPair, out_dir, fixed_noise=None):
    """Write the current fixed-noise generation as PGM and extend the loss log."""
    if pair.epoch < 1:
        raise ContractError("pair has not been trained yet")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        noise = pair.fixed_noise() if fixed_noise is None else fixed_noise
        image = pair.generate(noise)[0]
        pgm = out_dir / snapshot_name(pair.class_tag, pair.depth_index, pair.epoch)
        write_pgm(pgm, image)
        return pgm, append_loss_log(pair, out_dir)
    except OSError as exc:
        raise OSError(f"cannot write snapshot under {out_dir}: {exc}") from exc


def write_snapshots(pair: GanPair, out_dir):
    """Persist the snapshots captured during training."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for epoch, image in sorted(pair.snapshots.items()):
        path = out_dir / snapshot_name(pair.class_tag, pair.depth_index, epoch)
        write_pgm(path, image)
        paths.append(path)
    append_loss_log(pair, out_dir)
    return paths
