# Copyright 2025 The gdc-propagation authors.

import math

import numpy as np
import pytest
from scipy import ndimage

from errors import DimensionError, NonFiniteError
from grid import (
    BlurKernel,
    ImageGrid,
    conv2d_circular,
    crop,
    dwt,
    fft2,
    gaussian_kernel,
    grad_xy,
    idwt,
    ifft2,
    motion_kernel,
    pad_wrap,
    psnr,
    resize,
    ssim,
)


def random_grid(shape, seed=0):
    return ImageGrid(np.random.default_rng(seed).random(shape))


def test_grid_promotes_planes_and_is_read_only():
    """Test that 2-D input gains a channel axis and the stored array cannot be written."""
    u = ImageGrid(np.zeros((4, 5)))
    assert u.shape == (4, 5, 1)
    with pytest.raises(ValueError):
        u.data[0, 0, 0] = 1.0


def test_grid_rejects_non_finite_values():
    """Test that NaN or infinite samples are refused."""
    with pytest.raises(NonFiniteError):
        ImageGrid(np.array([[0.0, np.nan]]))
    with pytest.raises(NonFiniteError):
        ImageGrid(np.array([[np.inf]]))


def test_grid_arithmetic_checks_shapes():
    """Test elementwise operators and the shape check on mismatched operands."""
    a = ImageGrid.full(3, 3, 2.0)
    b = ImageGrid.full(3, 3, 0.5)
    assert (a + b) == ImageGrid.full(3, 3, 2.5)
    assert (a * b) == ImageGrid.full(3, 3, 1.0)
    assert (1.0 - b) == b
    assert a.dot(b) == pytest.approx(9.0)
    with pytest.raises(DimensionError):
        a + ImageGrid.zeros(3, 4)


def test_stack_and_split_channels():
    """Test that stacking then splitting gives back the parts."""
    a, b = random_grid((4, 4, 1), 1), random_grid((4, 4, 1), 2)
    stacked = ImageGrid.stack([a, b])
    assert stacked.channels == 2
    assert stacked.split(2) == [a, b]
    with pytest.raises(DimensionError):
        stacked.split(3)
    with pytest.raises(DimensionError):
        ImageGrid.stack([])


def test_kernel_invariants():
    """Test odd size, nonnegativity and unit sum of kernels."""
    with pytest.raises(DimensionError):
        BlurKernel(np.full((2, 2), 0.25))
    with pytest.raises(ValueError):
        BlurKernel(np.full((3, 3), 0.2))
    with pytest.raises(ValueError):
        BlurKernel(np.array([[0.5, -0.5, 1.0]]))
    assert BlurKernel.delta(3).weights[1, 1] == 1.0


def test_normalized_kernel_falls_back_to_uniform(caplog):
    """Test that a kernel without positive mass becomes uniform with a warning."""
    k = BlurKernel.normalized(-np.ones((3, 3)))
    assert np.allclose(k.weights, 1.0 / 9.0)
    assert "uniform" in caplog.text


def test_convolution_with_delta_is_identity():
    """Test that the delta kernel leaves an image unchanged."""
    u = random_grid((8, 8, 3))
    assert np.allclose(conv2d_circular(u, BlurKernel.delta(3)).data, u.data, atol=1e-12)


def test_convolution_matches_direct_periodic_sum():
    """Test the FFT convolution against direct periodic convolution."""
    u = random_grid((9, 7), 3)
    w = np.random.default_rng(4).random((3, 5))
    k = BlurKernel(w / w.sum())
    expected = ndimage.convolve(u.data[:, :, 0], k.weights, mode="wrap")
    assert np.allclose(conv2d_circular(u, k).data[:, :, 0], expected, atol=1e-12)


def test_convolution_rejects_oversized_kernel():
    """Test that a kernel larger than the image raises."""
    with pytest.raises(DimensionError):
        conv2d_circular(ImageGrid.zeros(3, 3), BlurKernel.uniform(5))


def test_fft_is_unitary():
    """Test the inverse and norm preservation of the unitary DFT."""
    u = random_grid((6, 10, 2))
    s = fft2(u)
    assert np.allclose(ifft2(s).data, u.data, atol=1e-12)
    assert np.linalg.norm(s.coeffs) == pytest.approx(u.norm())


@pytest.mark.parametrize("levels", [1, 2, 3])
def test_wavelet_is_orthonormal(levels):
    """Test perfect reconstruction and norm preservation of the Haar transform."""
    u = random_grid((16, 8, 1), levels)
    c = dwt(u, levels)
    assert np.linalg.norm(c.coeffs) == pytest.approx(u.norm())
    assert np.allclose(idwt(c).data, u.data, atol=1e-12)


def test_wavelet_rejects_indivisible_sizes():
    """Test that sizes not divisible by the block size raise."""
    with pytest.raises(DimensionError):
        dwt(ImageGrid.zeros(6, 8), 2)


def test_gradients_of_constant_vanish():
    """Test that periodic differences of a constant image are zero."""
    gx, gy = grad_xy(ImageGrid.full(5, 5, 0.3))
    assert gx.norm() == 0.0 and gy.norm() == 0.0


def test_psnr_values():
    """Test PSNR of a uniform offset, identical images and the cap."""
    ref = ImageGrid.full(8, 8, 0.5)
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0)
    assert math.isinf(psnr(ref, ref))
    assert psnr(ref, ref, cap=100.0) == 100.0


def test_ssim_range_and_minimum_size():
    """Test SSIM of identical images and the window size requirement."""
    u = random_grid((16, 16))
    assert ssim(u, u) == pytest.approx(1.0)
    assert 0.0 <= ssim(u, random_grid((16, 16), 9)) < 0.5
    with pytest.raises(DimensionError):
        ssim(ImageGrid.zeros(4, 4), ImageGrid.zeros(4, 4))


def test_pad_wrap_and_crop():
    """Test periodic padding to a multiple and cropping back."""
    u = random_grid((5, 6))
    padded = pad_wrap(u, 4)
    assert padded.shape == (8, 8, 1)
    assert crop(padded, 5, 6) == u
    assert pad_wrap(padded, 4) is padded


def test_resize_keeps_constants():
    """Test that bicubic resampling keeps a constant image constant."""
    out = resize(ImageGrid.full(12, 12, 0.4), 9, 9)
    assert out.shape == (9, 9, 1)
    assert np.allclose(out.data, 0.4)


def test_kernel_generators():
    """Test that generated kernels are on the simplex and symmetric where expected."""
    g = gaussian_kernel(5, 1.2)
    assert g.weights.sum() == pytest.approx(1.0)
    assert np.allclose(g.weights, g.weights.T)
    m = motion_kernel(7, 0.0)
    assert m.weights.sum() == pytest.approx(1.0)
    assert np.allclose(m.weights[3], m.weights.sum(axis=0))


def haar_matrix(n: int, levels: int) -> np.ndarray:
    """Dense orthonormal Haar analysis matrix for a signal of length ``n``."""
    total = np.eye(n)
    size = n
    for _ in range(levels):
        step = np.eye(n)
        h = np.zeros((size, size))
        for i in range(size // 2):
            h[i, 2 * i] = h[i, 2 * i + 1] = 1.0 / math.sqrt(2)
            h[size // 2 + i, 2 * i] = 1.0 / math.sqrt(2)
            h[size // 2 + i, 2 * i + 1] = -1.0 / math.sqrt(2)
        step[:size, :size] = h
        total = step @ total
        size //= 2
    return total


@pytest.mark.parametrize("levels", [1, 2])
def test_wavelet_matches_dense_matrices(levels):
    """Test the packed Haar layout against separable dense analysis matrices."""
    u = random_grid((8, 16), 30 + levels)
    rows, cols = haar_matrix(8, levels), haar_matrix(16, levels)
    expected = rows @ u.data[:, :, 0] @ cols.T
    assert np.allclose(dwt(u, levels).coeffs[:, :, 0], expected, atol=1e-12)


def test_wavelet_of_a_constant_is_its_approximation_band():
    """Test that a constant image has zero details and a scaled approximation band."""
    c = dwt(ImageGrid.full(8, 8, 0.3), 2).coeffs[:, :, 0]
    assert np.allclose(c[:2, :2], 4 * 0.3)
    detail = np.array(c)
    detail[:2, :2] = 0.0
    assert np.allclose(detail, 0.0, atol=1e-15)


def test_fft_matches_direct_sum():
    """Test the unitary 4x4 transform against the defining double sum."""
    u = random_grid((4, 4), 33)
    m = np.arange(4)
    dft = np.exp(-2j * np.pi * np.outer(m, m) / 4)
    expected = dft @ u.data[:, :, 0] @ dft.T / 4.0
    assert np.allclose(fft2(u).coeffs[:, :, 0], expected, atol=1e-12)


def test_gradients_match_loops():
    """Test periodic forward differences against an explicit loop."""
    u = random_grid((5, 7, 2), 34)
    gx, gy = grad_xy(u)
    h, w, channels = u.shape
    v = u.data
    for c in range(channels):
        for i in range(h):
            for j in range(w):
                assert gx.data[i, j, c] == pytest.approx(v[i, (j + 1) % w, c] - v[i, j, c])
                assert gy.data[i, j, c] == pytest.approx(v[(i + 1) % h, j, c] - v[i, j, c])
