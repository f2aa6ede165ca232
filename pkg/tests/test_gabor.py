"""Synthetic filter bank: kernel math, resize/crop plumbing, determinism."""

import math

import numpy as np
import pytest

from transferlab.gabor import (
    GaborConfig,
    center_crop,
    gabor_bank,
    gabor_kernel_raw,
    resize_bilinear,
    scale_to_match,
)


def crop_indices_oracle(n, size):
    # independent restatement: smaller margin leads when the delta is odd
    delta = n - size
    lead = delta // 2
    return lead, lead + size


def test_raw_kernel_center_value():
    for sigma_x, sigma_y, offset in [(2.0, 2.0, 0.0), (1.5, 3.0, 0.7), (2.0, 1.0, -1.2)]:
        k = gabor_kernel_raw(0.25, theta=0.4, sigma_x=sigma_x, sigma_y=sigma_y, offset=offset)
        center = (k.shape[0] // 2, k.shape[1] // 2)
        expected = math.cos(offset) / (2.0 * math.pi * sigma_x * sigma_y)
        assert np.real(k[center]) == pytest.approx(expected, abs=1e-12)


def test_raw_kernel_grid_extent():
    # sigma=2, n_stds=3, theta=0: half-extent ceil(6) = 6, so 13x13
    k = gabor_kernel_raw(0.1, theta=0.0, sigma_x=2.0, sigma_y=2.0)
    assert k.shape == (13, 13)
    k = gabor_kernel_raw(0.1, theta=np.pi / 4, sigma_x=2.0, sigma_y=2.0)
    half = math.ceil(6.0 * abs(math.cos(np.pi / 4)))
    assert k.shape == (2 * half + 1, 2 * half + 1)
    # tiny sigma still yields at least a 3x3 grid
    k = gabor_kernel_raw(0.1, theta=0.0, sigma_x=0.1, sigma_y=0.1)
    assert k.shape == (3, 3)


def test_raw_kernel_axis_aligned_mirror_symmetry():
    for freq in (0.08, 0.25, 0.32):
        k = np.real(gabor_kernel_raw(freq, theta=0.0, sigma_x=2.0, sigma_y=2.0))
        assert np.max(np.abs(k - k[::-1, :])) < 1e-12
        assert np.max(np.abs(k - k[:, ::-1])) < 1e-12


def test_raw_kernel_imaginary_part_is_odd():
    k = gabor_kernel_raw(0.25, theta=0.0, sigma_x=2.0, sigma_y=2.0)
    im = np.imag(k)
    assert np.max(np.abs(im + im[:, ::-1])) < 1e-12


def test_resize_identity_when_sizes_match():
    img = np.arange(49, dtype=np.float64).reshape(7, 7)
    out = resize_bilinear(img, 7, 7)
    np.testing.assert_allclose(out, img, rtol=0, atol=1e-12)


def test_resize_reproduces_affine_ramps():
    # bilinear interpolation is exact on affine images when every sampling
    # coordinate stays interior, which holds for this 13 -> 10 shrink
    h = w = 13
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.3 + 1.7 * rows - 0.9 * cols
    out = resize_bilinear(img, 10, 10)
    coords = (np.arange(10) + 0.5) * (13 / 10) - 0.5
    expected = 0.3 + 1.7 * coords[:, None] - 0.9 * coords[None, :]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_resize_preserves_mirror_symmetry():
    k = np.real(gabor_kernel_raw(0.16, theta=0.0, sigma_x=2.0, sigma_y=2.0))
    out = resize_bilinear(k, 10, 10)
    assert np.max(np.abs(out - out[::-1, :])) < 1e-12
    assert np.max(np.abs(out - out[:, ::-1])) < 1e-12


@pytest.mark.parametrize("n,size", [(10, 7), (13, 7), (9, 8), (8, 8), (11, 1)])
def test_center_crop_matches_index_oracle(n, size):
    img = np.arange(n * n, dtype=np.float64).reshape(n, n)
    lo, hi = crop_indices_oracle(n, size)
    np.testing.assert_array_equal(center_crop(img, size), img[lo:hi, lo:hi])


def test_center_crop_rejects_upscale():
    with pytest.raises(ValueError, match="cannot crop"):
        center_crop(np.zeros((5, 5)), 7)


def test_config_validation():
    with pytest.raises(ValueError):
        GaborConfig(n_angles=0)
    with pytest.raises(ValueError):
        GaborConfig(sigmas=())
    with pytest.raises(ValueError):
        GaborConfig(frequencies=())
    with pytest.raises(ValueError):
        GaborConfig(kernel_resize=5, kernel_crop=7)
    with pytest.raises(ValueError):
        GaborConfig(kernel_crop=0)
    assert GaborConfig().n_filters == 64


def test_bank_shape_and_order():
    config = GaborConfig()
    bank = gabor_bank(config)
    assert bank.shape == (64, 7, 7)
    assert bank.dtype == np.float64
    # row layout is sigmas x frequencies x angles; recompute one entry by hand
    sigma, freq_idx, angle_idx = 2.0, 2, 5
    theta = angle_idx / config.n_angles * np.pi
    raw = np.real(gabor_kernel_raw(config.frequencies[freq_idx], theta=theta,
                                   sigma_x=sigma, sigma_y=sigma))
    expected = center_crop(resize_bilinear(raw, 10, 10), 7)
    row = freq_idx * config.n_angles + angle_idx
    np.testing.assert_array_equal(bank[row], expected)


def test_bank_is_bitwise_deterministic():
    a = gabor_bank()
    b = gabor_bank()
    assert a.tobytes() == b.tobytes()


def test_bank_skips_resize_when_raw_kernel_is_small():
    config = GaborConfig(n_angles=1, sigmas=(2.0,), frequencies=(0.1,),
                         kernel_resize=20, kernel_crop=7)
    raw = np.real(gabor_kernel_raw(0.1, theta=0.0, sigma_x=2.0, sigma_y=2.0))
    np.testing.assert_array_equal(gabor_bank(config)[0], center_crop(raw, 7))


def test_bank_rejects_envelope_smaller_than_crop():
    config = GaborConfig(n_angles=1, sigmas=(0.5,), frequencies=(0.1,),
                         kernel_resize=10, kernel_crop=7)
    with pytest.raises(ValueError, match="envelope"):
        gabor_bank(config)


def test_scale_to_match_hits_reference_std():
    rng = np.random.default_rng(7)
    bank = gabor_bank()
    reference = rng.normal(0.0, 0.037, size=(5, 5, 3, 16))
    scaled = scale_to_match(bank, reference)
    assert float(np.std(scaled)) == pytest.approx(float(np.std(reference)), abs=1e-12)
    # one global factor: elementwise ratio is constant where the bank is nonzero
    mask = np.abs(bank) > 1e-9
    ratios = scaled[mask] / bank[mask]
    assert np.max(np.abs(ratios - ratios.flat[0])) < 1e-9


def test_scale_to_match_rejects_constant_bank():
    with pytest.raises(ValueError, match="zero variance"):
        scale_to_match(np.ones((4, 7, 7)), np.zeros((5, 5, 3, 16)))
