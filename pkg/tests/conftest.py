import numpy as np
import pytest

from gancnn.classifier import ClassifierTrainConfig
from gancnn.gan import GanTrainConfig, train_gan_bank
from gancnn.harness import split_stacks
from gancnn.volume import SliceStack

TINY_GAN = GanTrainConfig(
    max_epochs=2, early_stop_epoch=None, batch_size=4, noise_dim=4, snapshot_epochs=(1,), image_size=8,
    gen_dense_units=8, gen_channels=(4, 2), disc_filters=(2, 4), disc_dense_units=4,
)
TINY_CLASSIFIER = ClassifierTrainConfig(epochs=1, batch_size=8, filters=1, dense_units=(2,), conv_blocks=1)


def tiny_stacks(n_normal=20, n_bipolar=12, depth=3, size=8, seed=0):
    """Random slice stacks; bipolar ones carry a bright patch."""
    rng = np.random.default_rng(seed)
    out = []
    for label, n in (("normal", n_normal), ("bipolar", n_bipolar)):
        for i in range(n):
            s = rng.uniform(-0.6, 0.2, (depth, size, size))
            if label == "bipolar":
                s[:, 2:5, 2:5] += 0.6
            out.append(SliceStack(s, range(depth), label, "synthetic", f"{label}-{i:04d}"))
    return out


def tiny_dataset(seed=0, **kw):
    return split_stacks(tiny_stacks(seed=seed, **kw), 0.25, seed)


def tiny_bank(dataset, seed=0):
    from dataclasses import replace
    data = {c: dataset.by_class(c) for c in ("bipolar", "normal")}
    return train_gan_bank(data, replace(TINY_GAN, seed=seed))


# -- acceptance summary -------------------------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    cid, text = marker.args
    if rep.when == "call" or cid not in _criteria:
        _criteria[cid] = ("PASS" if rep.passed else "FAIL", text, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c[1:])):
        status, text, duration = _criteria[cid]
        terminalreporter.write_line(f"{status} {cid}: {text} ({duration:.1f}s)")


@pytest.fixture(scope="session")
def tiny_pipeline():
    ds = tiny_dataset()
    return ds, tiny_bank(ds)
