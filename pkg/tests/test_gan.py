from dataclasses import replace

import numpy as np
import pytest

from gancnn.blocks import checkpoint_bytes
from gancnn.errors import ConfigError, ContractError
from gancnn.gan import (
    GanBank, GanTrainConfig, append_loss_log, discriminator_accuracy, loss_log_name, pair_seed, pearson,
    snapshot_name, snapshot_progress, synthesize_stack, synthesize_stacks, train_gan_bank, train_slice_gan,
    write_snapshots,
)
from gancnn.volume import SliceStack, read_pgm

TINY = GanTrainConfig(
    max_epochs=6, early_stop_epoch=None, batch_size=4, noise_dim=4, snapshot_epochs=(1, 3, 6), image_size=8,
    gen_dense_units=8, gen_channels=(4, 2), disc_filters=(2, 4), disc_dense_units=4,
)


def _slices(n=6, size=8, seed=0):
    rng = np.random.default_rng(seed)
    base = np.tanh(rng.standard_normal((size, size)))
    return np.clip(base + 0.1 * rng.standard_normal((n, size, size)), -1, 1).astype(np.float32)


def _dataset(n=3, depth=3, size=8):
    out = {}
    for c, offset in (("bipolar", 0), ("normal", 50)):
        out[c] = [SliceStack(_slices(depth, size, seed=offset + i), range(5, 5 + depth), c, "real", f"{c}-{i}")
                  for i in range(n)]
    return out


# -- config ------------------------------------------------------------------------------

def test_defaults():
    c = GanTrainConfig()
    assert (c.max_epochs, c.early_stop_epoch, c.noise_dim) == (20000, 8000, 500)
    assert c.snapshot_epochs == (1, 50, 1000, 10000)
    assert c.epochs == 8000


def test_snapshot_beyond_max_rejected():
    with pytest.raises(ConfigError):
        GanTrainConfig(max_epochs=1000, snapshot_epochs=(5000,), early_stop_epoch=None)


def test_early_stop_beyond_max_rejected():
    with pytest.raises(ConfigError):
        GanTrainConfig(max_epochs=100, early_stop_epoch=200, snapshot_epochs=(1,))


# -- single pair --------------------------------------------------------------------------

def test_pair_invariants():
    pair = train_slice_gan(_slices(), TINY, "normal", 4)
    assert pair.epoch == len(pair.loss_history) == 6
    assert sorted(pair.snapshots) == [1, 3, 6]
    assert pair.generator.output_shape == (8, 8, 1)
    assert pair.discriminator.input_shape == (8, 8, 1)
    assert not pair.generator.training


def test_pair_deterministic():
    a = train_slice_gan(_slices(), TINY)
    b = train_slice_gan(_slices(), TINY)
    assert checkpoint_bytes(a.generator) == checkpoint_bytes(b.generator)
    assert checkpoint_bytes(a.discriminator) == checkpoint_bytes(b.discriminator)
    assert a.loss_history == b.loss_history


def test_seed_changes_result():
    a = train_slice_gan(_slices(), TINY)
    b = train_slice_gan(_slices(), replace(TINY, seed=1))
    assert checkpoint_bytes(a.generator) != checkpoint_bytes(b.generator)


def test_early_stop_caps_updates():
    capped = train_slice_gan(_slices(), replace(TINY, max_epochs=10, early_stop_epoch=4, snapshot_epochs=(1,)))
    short = train_slice_gan(_slices(), replace(TINY, max_epochs=4, early_stop_epoch=None, snapshot_epochs=(1,)))
    assert capped.epoch == len(capped.loss_history) == 4
    assert checkpoint_bytes(capped.generator) == checkpoint_bytes(short.generator)


def test_epoch_one_snapshot_is_noise():
    slices = _slices(20)
    pair = train_slice_gan(slices, TINY)
    assert abs(pearson(pair.snapshots[1], slices.mean(axis=0))) < 0.2


def test_generated_range():
    pair = train_slice_gan(_slices(), TINY)
    img = pair.generate(np.random.default_rng(0).standard_normal((16, 4)) * 10)
    assert img.shape == (16, 8, 8)
    assert img.min() >= -1 and img.max() <= 1


@pytest.mark.parametrize("bad", [np.zeros((1, 8, 8)), np.zeros((0, 8, 8)), np.full((3, 8, 8), 1.5),
                                 np.zeros((3, 16, 16))])
def test_contract_errors(bad):
    with pytest.raises(ContractError):
        train_slice_gan(bad, TINY)


def test_discriminator_accuracy_bounds():
    pair = train_slice_gan(_slices(), TINY)
    acc = discriminator_accuracy(pair, _slices(), n=16)
    assert 0 <= acc <= 1 and acc * 32 == int(acc * 32)


def test_pearson():
    a = np.arange(10.0)
    assert pearson(a, 2 * a + 1) == pytest.approx(1)
    assert pearson(a, -a) == pytest.approx(-1)
    assert pearson(a, np.ones(10)) == 0.0


# -- bank -------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bank():
    return train_gan_bank(_dataset(), TINY)


def test_bank_complete(bank):
    assert len(bank.pairs) == 6
    assert bank.is_complete("normal") and bank.is_complete("bipolar")
    assert sorted(bank.classes()) == ["bipolar", "normal"]
    assert len(bank.checkpoints()) == 12


def test_bank_pairs_use_own_slices_and_seed(bank):
    data = _dataset()
    for (c, d), pair in bank.pairs.items():
        assert pair.seed == pair_seed(TINY.seed, c, d)
        own = np.stack([s.slices[d] for s in data[c]])
        alone = train_slice_gan(own, replace(TINY, seed=pair.seed), c, d)
        assert checkpoint_bytes(alone.generator) == checkpoint_bytes(pair.generator)


def test_bank_parallel_matches_serial(bank):
    parallel = train_gan_bank(_dataset(), TINY, jobs=2)
    assert parallel.checkpoints() == bank.checkpoints()


def test_pair_seeds_distinct():
    seeds = {pair_seed(0, c, d) for c in ("normal", "bipolar") for d in range(22)}
    assert len(seeds) == 44


def test_bank_contract_errors():
    data = _dataset()
    with pytest.raises(ContractError):
        train_gan_bank({"normal": data["normal"]}, TINY)
    with pytest.raises(ContractError):
        train_gan_bank({"normal": data["normal"], "bipolar": data["bipolar"][:1]}, TINY)


def test_synthesize(bank):
    s = synthesize_stack(bank, "bipolar", 5, "gen-x")
    assert s.shape == (3, 8, 8)
    assert s.depth_indices == (5, 6, 7)
    assert (s.label, s.provenance, s.sample_id) == ("bipolar", "generated", "gen-x")
    assert s.slices.min() >= -1 and s.slices.max() <= 1
    again = synthesize_stack(bank, "bipolar", 5, "gen-x")
    assert s.slices.tobytes() == again.slices.tobytes()
    assert not np.array_equal(s.slices, synthesize_stack(bank, "bipolar", 6).slices)


def test_batched_synthesis_matches_single(bank):
    many = synthesize_stacks(bank, "normal", [3, 4, 5], ["a", "b", "c"])
    assert [s.sample_id for s in many] == ["a", "b", "c"]
    for seed, s in zip([3, 4, 5], many):
        np.testing.assert_allclose(s.slices, synthesize_stack(bank, "normal", seed).slices, atol=1e-6)
    assert synthesize_stacks(bank, "normal", []) == []
    with pytest.raises(ContractError):
        synthesize_stacks(bank, "normal", [1, 2], ["only-one"])


def test_synthesize_incomplete(bank):
    partial = GanBank({k: v for k, v in bank.pairs.items() if k != ("normal", 1)}, bank.n_layers)
    with pytest.raises(ContractError):
        synthesize_stack(partial, "normal", 0)


# -- snapshots --------------------------------------------------------------------------------

def test_snapshot_names():
    assert snapshot_name("bipolar", 3, 50) == "bipolar_d03_e00050.pgm"
    assert loss_log_name("normal", 21) == "normal_d21_loss.csv"


def test_write_snapshots_and_log(tmp_path):
    pair = train_slice_gan(_slices(), TINY, "normal", 2)
    paths = write_snapshots(pair, tmp_path)
    assert [p.name for p in paths] == [snapshot_name("normal", 2, e) for e in (1, 3, 6)]
    assert read_pgm(paths[0]).shape == (8, 8)
    log = (tmp_path / loss_log_name("normal", 2)).read_text().splitlines()
    assert len(log) == pair.epoch
    assert log[0].startswith("1,") and log[-1].startswith("6,")
    # append-only: a second call adds nothing for the same epoch count
    append_loss_log(pair, tmp_path)
    assert len((tmp_path / loss_log_name("normal", 2)).read_text().splitlines()) == pair.epoch


def test_snapshot_progress(tmp_path):
    pair = train_slice_gan(_slices(), TINY, "bipolar", 0)
    pgm, log = snapshot_progress(pair, tmp_path)
    assert pgm.name == "bipolar_d00_e00006.pgm"
    np.testing.assert_array_equal(read_pgm(pgm), read_pgm(write_snapshots(pair, tmp_path / "x")[-1]))
    assert len(log.read_text().splitlines()) == 6


def test_snapshot_untrained(tmp_path):
    from gancnn.gan import GanPair
    with pytest.raises(ContractError):
        snapshot_progress(GanPair(TINY.generator(), TINY.discriminator(), "normal", 0, 0), tmp_path)
