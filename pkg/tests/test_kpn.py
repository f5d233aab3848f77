import numpy as np
import pytest
import torch

from nightlift.errors import CompatibilityError, ConfigError, DataError, NumericError
from nightlift.kpn import (KpnConfig, KpnModel, delta_kernel_vector, load_checkpoint, pixelwise_filter,
                           predict_kernels, save_checkpoint, translate)
from nightlift.imaging import apply_pixelwise_filter
from helpers import impulse_support, kpn_gradient_error, outside_window
from oracles import naive_filter

SMALL = dict(base_channels=4, depth=2)


def test_config_validation():
    with pytest.raises(ConfigError):
        KpnConfig(k=4)
    assert KpnConfig(k=3, per_channel_kernels=True).kernel_channels == 27


@pytest.mark.parametrize("shape", [(16, 16), (13, 21), (5, 3)])
def test_kernel_field_shape(shape, rng):
    model = KpnModel(KpnConfig(k=3, **SMALL))
    kf = predict_kernels(model, rng.random((*shape, 3)))
    assert kf.data.shape == (9, *shape)
    assert translate(model, rng.random((*shape, 3))).raw.shape == (*shape, 3)


def test_initialisation_is_near_identity(rng):
    model = KpnModel(KpnConfig(**SMALL))
    img = rng.random((24, 24, 3))
    out = translate(model, img).raw
    assert np.abs(out - img).max() < 0.05
    kf = predict_kernels(model, img)
    assert np.abs(kf.data).max() <= model.init_bound


def test_seeded_init_is_deterministic_and_leaves_global_rng_alone():
    torch.manual_seed(7)
    before = torch.rand(1)
    torch.manual_seed(7)
    a = KpnModel(KpnConfig(seed=3, **SMALL))
    after = torch.rand(1)
    b = KpnModel(KpnConfig(seed=3, **SMALL))
    assert before == after
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_constant_delta_kernels_are_exact_identity(rng):
    cfg = KpnConfig(k=5, **SMALL)
    model = KpnModel(cfg).set_constant_kernels(delta_kernel_vector(cfg))
    img = rng.random((10, 12, 3))
    np.testing.assert_allclose(translate(model, img).raw, img, atol=1e-6)
    with pytest.raises(CompatibilityError):
        model.set_constant_kernels(np.ones(3))


def test_torch_filter_matches_oracle(rng):
    img = rng.random((7, 8, 3))
    kern = rng.normal(size=(9, 7, 8))
    out = pixelwise_filter(torch.tensor(img.transpose(2, 0, 1))[None], torch.tensor(kern)[None], 3, False,
                           "replicate")
    np.testing.assert_allclose(out[0].numpy().transpose(1, 2, 0), naive_filter(img, kern, 3), atol=1e-10)


def test_per_channel_model(rng):
    cfg = KpnConfig(k=3, per_channel_kernels=True, **SMALL)
    model = KpnModel(cfg)
    img = rng.random((8, 8, 3))
    assert predict_kernels(model, img).data.shape == (27, 8, 8)
    model.set_constant_kernels(delta_kernel_vector(cfg))
    np.testing.assert_allclose(translate(model, img).raw, img, atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(seed):
    assert kpn_gradient_error(seed) < 1e-3


def test_impulse_stays_inside_window(rng):
    cfg = KpnConfig(k=3, seed=1, init_scale=0.5, **SMALL)
    model = KpnModel(cfg)
    img = rng.random((16, 16, 3))
    for y, x in [(8, 8), (0, 0), (15, 7)]:
        mask = impulse_support(model, img, y, x)
        assert mask[y, x]
        assert not outside_window(mask, y, x, cfg.k).any()


def test_nan_input_raises_numeric_error():
    model = KpnModel(KpnConfig(**SMALL))
    x = torch.full((1, 3, 8, 8), float("nan"))
    with pytest.raises(NumericError, match="encoder"):
        model(x)


def test_checkpoint_round_trip(tmp_path, rng):
    model = KpnModel(KpnConfig(k=3, seed=5, **SMALL))
    path = tmp_path / "kpn.npz"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path, expect_k=3)
    img = rng.random((9, 9, 3))
    np.testing.assert_array_equal(translate(loaded, img).raw, translate(model, img).raw)
    assert loaded.init_bound == model.init_bound
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, expect_k=5)


def test_checkpoint_rejects_foreign_archive(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, meta=np.array('{"kind": "tiny_detector"}'))
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_translation_is_filter_of_predicted_kernels(rng):
    model = KpnModel(KpnConfig(k=3, init_scale=0.3, **SMALL))
    img = rng.random((10, 10, 3))
    kf = predict_kernels(model, img)
    np.testing.assert_allclose(translate(model, img).raw, apply_pixelwise_filter(img, kf), atol=1e-5)
