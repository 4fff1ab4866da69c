import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lenspatch.errors import ShapeError
from lenspatch.imaging import (
    compare,
    load_png,
    load_tensor,
    mean_report,
    mse,
    perceptual_distance,
    psnr,
    psnr_from_mse,
    quantize8,
    save_png,
    save_tensor,
    ssim,
)

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)
images = arrays(np.float64, (16, 16, 3), elements=unit)


def test_mse_analytic_cases():
    z = np.zeros((8, 8, 3))
    assert mse(z, z) == 0.0
    assert mse(z, np.ones_like(z)) == 1.0
    assert mse(z, np.full_like(z, 0.5)) == 0.25


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)))


def test_psnr_values():
    a = np.zeros((10, 10, 3))
    b = np.full_like(a, 0.1)  # mse = 1e-2
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == math.inf
    assert psnr_from_mse(1.95e-4) == pytest.approx(37.10, abs=0.005)


@settings(max_examples=50, deadline=None)
@given(images, images)
def test_mse_nonnegative_and_psnr_identity(a, b):
    m = mse(a, b)
    assert m >= 0
    assert (m == 0) == np.array_equal(a, b)
    if m > 0:
        assert abs(psnr(a, b) + 10 * math.log10(m)) <= 1e-9


def test_ssim_identity_and_constant_images():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(32, 32, 3))
    assert ssim(x, x) == 1.0
    zeros, ones = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    c1 = 0.01 ** 2
    assert ssim(zeros, ones) == pytest.approx(c1 / (1 + c1), rel=1e-9)


def test_ssim_symmetry_and_channel_permutation():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(24, 24, 3)), rng.uniform(size=(24, 24, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    perm = [2, 0, 1]
    assert ssim(a[..., perm], b[..., perm]) == pytest.approx(ssim(a, b), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


def test_perceptual_identity_symmetry_and_noise_monotone():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.2, 0.8, size=(32, 32, 3))
    assert perceptual_distance(x, x) == 0.0
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert perceptual_distance(x, y) == pytest.approx(perceptual_distance(y, x), rel=1e-6)
    noise = rng.normal(0, 1, x.shape)
    small = perceptual_distance(x, np.clip(x + 0.05 * noise, 0, 1))
    large = perceptual_distance(x, np.clip(x + 0.2 * noise, 0, 1))
    assert 0 < small < large


@settings(max_examples=20, deadline=None)
@given(images, images)
def test_perceptual_pseudometric(a, b):
    d = perceptual_distance(a, b)
    assert d >= 0
    assert d == pytest.approx(perceptual_distance(b, a), rel=1e-5, abs=1e-7)


def test_compare_report_invariants():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(16, 16, 3))
    r = compare(a, a)
    assert r.mse == 0 and r.psnr == math.inf and r.ssim == 1.0 and r.perceptual == 0.0
    b = np.clip(a + 0.1, 0, 1)
    avg = mean_report([compare(a, b), compare(b, a)])
    assert avg.mse == pytest.approx(mse(a, b))


def test_png_round_trip_is_8bit_quantization(tmp_path):
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(9, 12, 3))
    save_png(tmp_path / "x.png", x)
    np.testing.assert_allclose(load_png(tmp_path / "x.png"), quantize8(x), atol=1e-12)


def test_tensor_round_trip(tmp_path):
    x = np.random.default_rng(5).uniform(size=(8, 8, 3)).astype(np.float32)
    save_tensor(tmp_path / "t.bin", x)
    assert (tmp_path / "t.bin.json").exists()
    np.testing.assert_array_equal(load_tensor(tmp_path / "t.bin"), x)
