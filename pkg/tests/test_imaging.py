import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nightlift.errors import DataError, ShapeError
from nightlift.imaging import (
    Image,
    KernelField,
    apply_pixelwise_filter,
    clamp_to_unit,
    filter_gradients,
    psnr,
    read_image,
    write_image,
)
from oracles import central_differences, naive_filter


def test_delta_kernels_are_identity(impl):
    img = np.random.default_rng(0).random((8, 8, 3))
    for padding in ("replicate", "zero"):
        out = apply_pixelwise_filter(img, KernelField.delta(8, 8, k=5), padding, impl=impl)
        np.testing.assert_allclose(out, img, atol=1e-7)


def test_uniform_kernel_on_constant_image(impl):
    img = np.full((6, 7, 3), 0.4)
    out = apply_pixelwise_filter(img, KernelField.uniform(6, 7, k=5), "replicate", impl=impl)
    np.testing.assert_allclose(out, 0.4, atol=1e-12)


def test_matches_loop_oracle(impl, rng):
    img = rng.random((5, 5, 3))
    kern = rng.normal(size=(9, 5, 5))
    out = apply_pixelwise_filter(img, KernelField(kern, 3), impl=impl)
    np.testing.assert_allclose(out, naive_filter(img, kern, 3), atol=1e-6)


@pytest.mark.parametrize("padding", ["replicate", "zero"])
@pytest.mark.parametrize("per_channel", [False, True])
def test_oracle_random_instances(impl, padding, per_channel):
    rng = np.random.default_rng(7)
    for _ in range(15):
        H, W = rng.integers(1, 10, size=2)
        k = int(rng.choice([1, 3, 5]))
        C = int(rng.choice([1, 3]))
        img = rng.random((H, W, C))
        P = k * k * (C if per_channel else 1)
        kern = rng.normal(size=(P, H, W))
        kf = KernelField(kern, k, per_channel=per_channel)
        out = apply_pixelwise_filter(img, kf, padding, impl=impl)
        expected = naive_filter(img, kern, k, padding, per_channel)
        np.testing.assert_allclose(out, expected, atol=1e-6)


def test_float32_path(impl, rng):
    img = rng.random((6, 6, 3)).astype(np.float32)
    kern = rng.normal(size=(25, 6, 6)).astype(np.float32)
    out = apply_pixelwise_filter(img, KernelField(kern, 5), impl=impl)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_filter(img, kern, 5), atol=1e-5)


def test_shape_errors():
    img = np.zeros((4, 4, 3))
    with pytest.raises(ShapeError):
        apply_pixelwise_filter(img, KernelField.delta(5, 4, k=3))
    with pytest.raises(ValueError):
        KernelField(np.zeros((16, 4, 4)), 4)
    with pytest.raises(ShapeError):
        filter_gradients(img, KernelField.delta(4, 4, k=3), np.zeros((4, 5, 3)))


def test_zero_upstream_gives_zero_gradients(impl, rng):
    img = rng.random((4, 4, 3))
    kf = KernelField(rng.normal(size=(9, 4, 4)), 3)
    gi, gk = filter_gradients(img, kf, np.zeros_like(img), impl=impl)
    assert not gi.any() and not gk.any()


@pytest.mark.parametrize("padding", ["replicate", "zero"])
def test_gradients_match_finite_differences(impl, padding):
    rng = np.random.default_rng(3)
    img = rng.random((4, 4, 1))
    kern = rng.normal(size=(9, 4, 4))
    up = rng.normal(size=(4, 4, 1))

    def loss_img(x):
        return float(np.sum(apply_pixelwise_filter(x, KernelField(kern, 3), padding, impl=impl) * up))

    def loss_kern(kv):
        return float(np.sum(apply_pixelwise_filter(img, KernelField(kv, 3), padding, impl=impl) * up))

    gi, gk = filter_gradients(img, KernelField(kern, 3), up, padding, impl=impl)
    np.testing.assert_allclose(gi, central_differences(loss_img, img), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(gk, central_differences(loss_kern, kern), rtol=1e-4, atol=1e-8)


def test_per_channel_gradients(impl):
    rng = np.random.default_rng(5)
    img = rng.random((3, 4, 3))
    kern = rng.normal(size=(27, 3, 4))
    up = rng.normal(size=(3, 4, 3))

    def f_img(x):
        return float(np.sum(apply_pixelwise_filter(x, KernelField(kern, 3, True), impl=impl) * up))

    def f_kern(kv):
        return float(np.sum(apply_pixelwise_filter(img, KernelField(kv, 3, True), impl=impl) * up))

    gi, gk = filter_gradients(img, KernelField(kern, 3, True), up, impl=impl)
    np.testing.assert_allclose(gi, central_differences(f_img, img), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(gk, central_differences(f_kern, kern), rtol=1e-4, atol=1e-8)


def test_constant_image_kernel_gradient(impl, rng):
    # d out(i,j,c)/dK(i,j)[p] = constant at interior pixels, summed over channels
    img = np.full((7, 7, 3), 0.3)
    kf = KernelField(rng.normal(size=(9, 7, 7)), 3)
    up = rng.normal(size=(7, 7, 3))
    _, gk = filter_gradients(img, kf, up, "zero", impl=impl)
    expected = up.sum(axis=2) * 0.3
    for p in range(9):
        np.testing.assert_allclose(gk[p, 1:-1, 1:-1], expected[1:-1, 1:-1], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    i1, i2 = rng.random((2, 6, 5, 3))
    k1, k2 = rng.normal(size=(2, 9, 6, 5))
    K1 = KernelField(k1, 3)
    lhs = apply_pixelwise_filter(a * i1 + b * i2, K1)
    rhs = a * apply_pixelwise_filter(i1, K1) + b * apply_pixelwise_filter(i2, K1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)
    lhs = apply_pixelwise_filter(i1, KernelField(a * k1 + b * k2, 3))
    rhs = a * apply_pixelwise_filter(i1, K1) + b * apply_pixelwise_filter(i1, KernelField(k2, 3))
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-2, 2), st.integers(-2, 2))
def test_shift_equivariance_interior(seed, dy, dx):
    rng = np.random.default_rng(seed)
    k, r, n = 3, 1, 12
    img = rng.random((n, n, 1))
    kern = rng.normal(size=(k * k, n, n))
    out = apply_pixelwise_filter(img, KernelField(kern, k), "zero")
    shifted = apply_pixelwise_filter(
        np.roll(img, (dy, dx), axis=(0, 1)), KernelField(np.roll(kern, (dy, dx), axis=(1, 2)), k), "zero"
    )
    rolled = np.roll(out, (dy, dx), axis=(0, 1))
    # output pixel p (shifted) <-> p - d (original); both windows must stay inside the frame
    ys = slice(max(r, r + dy), min(n - r, n - r + dy))
    xs = slice(max(r, r + dx), min(n - r, n - r + dx))
    np.testing.assert_allclose(shifted[ys, xs], rolled[ys, xs], atol=1e-12)


def test_psnr():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0)
    rng = np.random.default_rng(1)
    x, y = rng.random((2, 5, 6, 3))
    mse = sum((p - q) ** 2 for p, q in zip(x.ravel(), y.ravel())) / x.size
    assert psnr(x, y) == pytest.approx(10 * np.log10(1 / mse), rel=1e-12)
    with pytest.raises(ShapeError):
        psnr(a, np.zeros((4, 5, 3)))


def test_clamp():
    img = np.array([[[1.3], [-0.2], [0.5]]])
    out = clamp_to_unit(img)
    np.testing.assert_array_equal(out.ravel(), [1.0, 0.0, 0.5])
    np.testing.assert_array_equal(clamp_to_unit(out), out)
    with pytest.raises(DataError):
        clamp_to_unit(np.array([[[np.nan]]]))


def test_png_roundtrip(tmp_path, rng):
    img = np.round(rng.random((5, 6, 3)) * 255) / 255
    write_image(tmp_path / "a.png", img)
    back = read_image(tmp_path / "a.png")
    assert isinstance(back, Image) and back.id == "a"
    np.testing.assert_allclose(back.data, img, atol=1e-12)
    write_image(tmp_path / "b.png", np.full((2, 2, 3), 1.7))
    assert read_image(tmp_path / "b.png").data.max() == 1.0
