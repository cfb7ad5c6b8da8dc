import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gancnn import blocks
from gancnn.blocks import (
    ModelGraph, ParamCountConvention, build_classifier, build_discriminator, build_generator, checkpoint_bytes,
    count_params, infer_shapes, load_checkpoint,
)
from gancnn.errors import ContractError, ShapeError
from gancnn.tensor import Tensor

from tables import (
    CLASSIFIER_ROWS, CLASSIFIER_TOTAL, DISCRIMINATOR_ROWS, DISCRIMINATOR_TOTAL, GENERATOR_ROWS, GENERATOR_TOTAL,
    compare,
)


@pytest.mark.parametrize("build,rows,total", [
    (build_generator, GENERATOR_ROWS, GENERATOR_TOTAL),
    (build_discriminator, DISCRIMINATOR_ROWS, DISCRIMINATOR_TOTAL),
    (build_classifier, CLASSIFIER_ROWS, CLASSIFIER_TOTAL),
])
def test_architecture_matches_table(build, rows, total):
    assert compare(build(), rows, total) == []


def test_generator_reconstructed_cell():
    assert count_params(build_generator()).per_layer[3] == 67_174_400


def test_spot_counts():
    assert count_params(build_discriminator()).per_layer[7] == 2_097_216
    assert count_params(build_classifier()).per_layer[0] == 1792
    assert count_params(build_classifier()).per_layer[15] == 514
    assert build_classifier().infer_shapes()[10] == (2048,)


def test_batchnorm_convention():
    g = build_generator()
    assert count_params(g).per_layer[1] == 4096
    assert count_params(g, ParamCountConvention(False)).per_layer[1] == 2048


def test_parameter_free_layers_count_zero():
    for model in (build_generator(), build_discriminator(), build_classifier()):
        counts = count_params(model).per_layer
        for spec, n in zip(model.layers, counts):
            if spec.kind in {"relu", "leaky_relu", "sigmoid", "tanh", "softmax", "maxpool3d", "flatten",
                             "reshape", "dropout"}:
                assert n == 0


def test_classifier_too_small_fails_at_row_9():
    with pytest.raises(ShapeError) as info:
        infer_shapes(build_classifier(), (16, 16, 22, 1))
    assert info.value.layer_index == 9
    assert "layer 9" in str(info.value)


def test_empty_model_echoes_input():
    assert ModelGraph("empty", (3, 4), []).output_shape == (3, 4)
    assert infer_shapes(ModelGraph("empty", (3, 4), []), (3, 4)) == []


def test_rank_mismatch_names_layer():
    model = build_discriminator()
    with pytest.raises(ShapeError) as info:
        infer_shapes(model, (64, 64))
    assert info.value.layer_index == 1


def test_desk_variants_build():
    g = build_generator(noise_dim=32, image_size=16, dense_units=64, channels=(32, 16))
    d = build_discriminator(image_size=16, filters=(16, 32), dense_units=32)
    c = build_classifier((16, 16, 22, 1), filters=8, dense_units=(32, 16), conv_blocks=2)
    assert g.output_shape == (16, 16, 1)
    assert d.output_shape == (1,)
    assert c.output_shape == (2,)


def test_init_determinism_and_statistics():
    a = build_discriminator().init_params(11)
    b = build_discriminator().init_params(11)
    c = build_discriminator().init_params(12)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(c)
    k = a.params[7]["kernel"].data
    assert abs(k.mean()) < 1e-3
    assert 0.015 < k.std() < 0.02  # truncation at two std narrows the spread
    assert np.abs(k).max() <= 0.04 + 1e-7
    assert not a.params[7]["bias"].data.any()


def test_batchnorm_init_and_trainable_split():
    g = build_generator(noise_dim=8, image_size=8, dense_units=4, channels=(2, 2)).init_params(0)
    bn = g.params[1]
    assert np.all(bn["gamma"].data == 1) and not bn["beta"].data.any()
    assert np.all(bn["moving_variance"].data == 1) and not bn["moving_mean"].data.any()
    names = {t.name.split(".")[1] for t in g.trainable()}
    assert "moving_mean" not in names and "gamma" in names


def test_forward_purity():
    model = build_classifier((8, 8, 8, 1), filters=2, dense_units=(4,), conv_blocks=1).init_params(3)
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (3, 8, 8, 8, 1)))
    a = model(x, training=False).data
    b = model(x, training=False).data
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-5)


def test_logits_flag_skips_output_activation():
    model = build_discriminator(image_size=8, filters=(2, 2), dense_units=3).init_params(1)
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 8, 8, 1)))
    z = model(x, logits=True).data
    p = model(x).data
    np.testing.assert_allclose(p, 1 / (1 + np.exp(-z)), rtol=1e-5)


def test_uninitialized_model_errors():
    with pytest.raises(ContractError):
        build_discriminator()(Tensor(np.zeros((1, 64, 64, 1))))


# -- checkpoints -----------------------------------------------------------------------

def _small_generator():
    return build_generator(noise_dim=6, image_size=8, dense_units=5, channels=(3, 2))


def test_checkpoint_round_trip(tmp_path):
    model = _small_generator().init_params(4)
    path = tmp_path / "g.ckpt"
    blocks.save_checkpoint(model, path)
    loaded = load_checkpoint(path, _small_generator())
    assert checkpoint_bytes(loaded) == path.read_bytes()
    z = Tensor(np.random.default_rng(0).standard_normal((2, 6)))
    np.testing.assert_array_equal(model(z).data, loaded(z).data)
    assert len(loaded.trainable()) == len(model.trainable())


def test_checkpoint_header_layout():
    data = checkpoint_bytes(_small_generator().init_params(0))
    assert data[:8] == b"GCNNCKPT"
    assert int.from_bytes(data[8:12], "little") == 1
    taglen = int.from_bytes(data[12:16], "little")
    assert data[16:16 + taglen] == b"generator"
    assert int.from_bytes(data[16 + taglen:20 + taglen], "little") == 11


def test_checkpoint_rejects_wrong_kind_or_shape():
    data = checkpoint_bytes(_small_generator().init_params(0))
    with pytest.raises(ContractError):
        load_checkpoint(data, build_discriminator(image_size=8, filters=(2, 2), dense_units=3))
    with pytest.raises(ShapeError):
        load_checkpoint(data, build_generator(noise_dim=7, image_size=8, dense_units=5, channels=(3, 2)))
    with pytest.raises(ContractError):
        load_checkpoint(b"nonsense" + data[8:], _small_generator())


@given(st.integers(0, 2**63 - 1))
@settings(max_examples=15, deadline=None)
def test_checkpoint_bytes_stable_per_seed(seed):
    assert checkpoint_bytes(_small_generator().init_params(seed)) == \
        checkpoint_bytes(_small_generator().init_params(seed))


# -- shape algebra properties ----------------------------------------------------------

@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_conv2d_shape_formulas(size, kernel, stride):
    model = ModelGraph("t", (size, size, 1), [blocks.Conv2D(2, kernel, stride, "same")])
    assert model.output_shape == (-(-size // stride), -(-size // stride), 2)
    valid = ModelGraph("t", (size, size, 1), [blocks.Conv2D(2, kernel, stride, "valid")])
    if size >= kernel:
        n = (size - kernel) // stride + 1
        assert valid.output_shape == (n, n, 2)
    else:
        with pytest.raises(ShapeError):
            valid.output_shape


@given(st.integers(2, 30), st.integers(2, 30), st.integers(2, 30))
@settings(max_examples=60, deadline=None)
def test_pool_floor_formula(h, w, d):
    model = ModelGraph("t", (h, w, d, 3), [blocks.MaxPool3D()])
    assert model.output_shape == (h // 2, w // 2, d // 2, 3)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        blocks.LayerSpec("warp")
    with pytest.raises(ValueError):
        blocks.Dense(0)
