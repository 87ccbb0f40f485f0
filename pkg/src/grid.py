# Copyright 2025 The gdc-propagation authors.

"""Image containers, transforms and quality metrics.

Every boundary in this module is periodic, so convolutions and finite differences are
diagonalised by the discrete Fourier transform.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy import ndimage

from errors import DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

Scalar = Union[int, float]


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Immutable H x W x C field of finite float64 values.

    Images carry one or three channels and live nominally in [0, 1]. Gradient fields
    stack their horizontal and vertical components as extra channels.
    """

    data: np.ndarray

    def __post_init__(self):
        array = np.array(self.data, dtype=np.float64, copy=True)
        if array.ndim == 2:
            array = array[:, :, np.newaxis]
        if array.ndim != 3 or min(array.shape) < 1:
            raise DimensionError(f"expected an H x W x C array, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("image contains NaN or infinite values")
        array.flags.writeable = False
        object.__setattr__(self, "data", array)

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 1) -> "ImageGrid":
        """Return an all-zero grid."""
        return cls(np.zeros((height, width, channels)))

    @classmethod
    def full(cls, height: int, width: int, value: float, channels: int = 1) -> "ImageGrid":
        """Return a constant grid."""
        return cls(np.full((height, width, channels), float(value)))

    @classmethod
    def stack(cls, grids: Iterable["ImageGrid"]) -> "ImageGrid":
        """Concatenate grids of equal height and width along the channel axis."""
        grids = list(grids)
        if not grids:
            raise DimensionError("cannot stack an empty sequence of grids")
        _check_plane(grids[0], *grids[1:])
        return cls(np.concatenate([g.data for g in grids], axis=2))

    @property
    def height(self) -> int:
        """Number of rows."""
        return self.data.shape[0]

    @property
    def width(self) -> int:
        """Number of columns."""
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        """Number of channels."""
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        """The (height, width, channels) triple."""
        return self.data.shape  # type: ignore[return-value]

    def channel(self, index: int) -> "ImageGrid":
        """Return a single channel as a one-channel grid."""
        return ImageGrid(self.data[:, :, index : index + 1])

    def split(self, parts: int) -> list["ImageGrid"]:
        """Split the channel axis into ``parts`` equally sized grids."""
        if self.channels % parts:
            raise DimensionError(f"cannot split {self.channels} channels into {parts} parts")
        return [ImageGrid(a) for a in np.split(self.data, parts, axis=2)]

    def norm(self) -> float:
        """Euclidean norm over all entries."""
        return float(np.linalg.norm(self.data.ravel()))

    def dot(self, other: "ImageGrid") -> float:
        """Euclidean inner product."""
        _check_same(self, other)
        return float(np.dot(self.data.ravel(), other.data.ravel()))

    def clip(self, low: float = 0.0, high: float = 1.0) -> "ImageGrid":
        """Clip values into [low, high]."""
        return ImageGrid(np.clip(self.data, low, high))

    def map(self, fn) -> "ImageGrid":
        """Apply an array function and wrap the result."""
        return ImageGrid(fn(self.data))

    def _operand(self, other):
        if isinstance(other, ImageGrid):
            _check_same(self, other)
            return other.data
        return float(other)

    def __add__(self, other: Union["ImageGrid", Scalar]) -> "ImageGrid":
        return ImageGrid(self.data + self._operand(other))

    __radd__ = __add__

    def __sub__(self, other: Union["ImageGrid", Scalar]) -> "ImageGrid":
        return ImageGrid(self.data - self._operand(other))

    def __rsub__(self, other: Scalar) -> "ImageGrid":
        return ImageGrid(float(other) - self.data)

    def __mul__(self, other: Union["ImageGrid", Scalar]) -> "ImageGrid":
        return ImageGrid(self.data * self._operand(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Scalar) -> "ImageGrid":
        return ImageGrid(self.data / float(other))

    def __neg__(self) -> "ImageGrid":
        return ImageGrid(-self.data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class BlurKernel:
    """Nonnegative point spread function on the unit simplex with odd dimensions."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 2 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise DimensionError(f"kernel dimensions must be odd, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("kernel contains NaN or infinite values")
        if np.any(w < 0):
            raise ValueError("kernel weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"kernel weights must sum to 1, got {w.sum()!r}")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, weights: np.ndarray) -> "BlurKernel":
        """Clip negative weights and renormalise; fall back to uniform when nothing is left."""
        w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            logger.warning("kernel has no positive mass, using a uniform kernel")
            return cls.uniform(*w.shape)
        return cls(w / total)

    @classmethod
    def delta(cls, kh: int = 1, kw: Optional[int] = None) -> "BlurKernel":
        """Identity kernel of the given odd size."""
        kw = kh if kw is None else kw
        w = np.zeros((kh, kw))
        w[kh // 2, kw // 2] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, kh: int, kw: Optional[int] = None) -> "BlurKernel":
        """Box kernel of the given odd size."""
        kw = kh if kw is None else kw
        return cls(np.full((kh, kw), 1.0 / (kh * kw)))

    @property
    def size(self) -> tuple[int, int]:
        """The (kh, kw) pair."""
        return self.weights.shape  # type: ignore[return-value]

    def flipped(self) -> "BlurKernel":
        """Adjoint kernel, the point reflection about the centre."""
        return BlurKernel(self.weights[::-1, ::-1])

    def otf(self, height: int, width: int) -> np.ndarray:
        """Unnormalised DFT of the kernel embedded in an H x W grid, centre at the origin."""
        kh, kw = self.size
        if kh > height or kw > width:
            raise DimensionError(f"kernel {self.size} does not fit in a {height}x{width} image")
        return kernel_otf(self.weights, height, width)


def kernel_otf(weights: np.ndarray, height: int, width: int) -> np.ndarray:
    """Embed a centred filter of odd size in an H x W grid and transform it.

    Args:
        weights: the (kh, kw) filter, not necessarily on the simplex.
        height: grid height.
        width: grid width.

    Returns:
        The complex (H, W) transfer function.
    """
    kh, kw = weights.shape
    padded = np.zeros((height, width))
    padded[:kh, :kw] = weights
    padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return sfft.fft2(padded)


@dataclass(frozen=True)
class SpectralImage:
    """Unitary 2-D DFT coefficients of an ImageGrid, one plane per channel."""

    coeffs: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        """The (height, width, channels) triple."""
        return self.coeffs.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class WaveletCoeffs:
    """Orthonormal Haar coefficients in the packed pyramid layout.

    The approximation band of the deepest level sits in the top-left corner; each level
    recurses into the top-left quadrant of the previous one.
    """

    coeffs: np.ndarray
    levels: int


def fft2(u: ImageGrid) -> SpectralImage:
    """Unitary forward DFT over the two spatial axes."""
    return SpectralImage(sfft.fft2(u.data, axes=(0, 1), norm="ortho"))


def ifft2(s: SpectralImage) -> ImageGrid:
    """Unitary inverse DFT; the imaginary residue is discarded."""
    return ImageGrid(sfft.ifft2(s.coeffs, axes=(0, 1), norm="ortho").real)


def filter_circular(data: np.ndarray, transfer: np.ndarray) -> np.ndarray:
    """Multiply every channel of ``data`` by a transfer function in the Fourier domain."""
    spectrum = sfft.fft2(data, axes=(0, 1))
    return sfft.ifft2(spectrum * transfer[:, :, np.newaxis], axes=(0, 1)).real


def conv2d_circular(u: ImageGrid, k: BlurKernel) -> ImageGrid:
    """Periodic convolution (u * k)(x) = sum_a k(a) u(x - a), per channel.

    Raises:
        DimensionError: if the kernel is larger than the image.
    """
    return ImageGrid(filter_circular(u.data, k.otf(u.height, u.width)))


def _check_levels(height: int, width: int, levels: int):
    step = 2**levels
    if levels < 1 or height % step or width % step:
        raise DimensionError(
            f"image {height}x{width} is not divisible by 2^{levels} for the wavelet transform"
        )


def _haar_analysis(a: np.ndarray, axis: int) -> np.ndarray:
    even = np.take(a, np.arange(0, a.shape[axis], 2), axis=axis)
    odd = np.take(a, np.arange(1, a.shape[axis], 2), axis=axis)
    return np.concatenate([(even + odd) / math.sqrt(2), (even - odd) / math.sqrt(2)], axis=axis)


def _haar_synthesis(a: np.ndarray, axis: int) -> np.ndarray:
    half = a.shape[axis] // 2
    lo = np.take(a, np.arange(half), axis=axis)
    hi = np.take(a, np.arange(half, 2 * half), axis=axis)
    out = np.empty_like(a)
    index_even = [slice(None)] * a.ndim
    index_odd = [slice(None)] * a.ndim
    index_even[axis] = slice(0, None, 2)
    index_odd[axis] = slice(1, None, 2)
    out[tuple(index_even)] = (lo + hi) / math.sqrt(2)
    out[tuple(index_odd)] = (lo - hi) / math.sqrt(2)
    return out


def dwt(u: ImageGrid, levels: int = 1) -> WaveletCoeffs:
    """Orthonormal Haar analysis with ``levels`` levels.

    Raises:
        DimensionError: if height or width is not divisible by 2**levels.
    """
    _check_levels(u.height, u.width, levels)
    c = np.array(u.data)
    h, w = u.height, u.width
    for _ in range(levels):
        band = c[:h, :w]
        c[:h, :w] = _haar_analysis(_haar_analysis(band, 0), 1)
        h, w = h // 2, w // 2
    return WaveletCoeffs(c, levels)


def idwt(coeffs: WaveletCoeffs) -> ImageGrid:
    """Orthonormal Haar synthesis, the exact inverse of :func:`dwt`."""
    c = np.array(coeffs.coeffs)
    height, width = c.shape[:2]
    _check_levels(height, width, coeffs.levels)
    for level in reversed(range(coeffs.levels)):
        h, w = height >> level, width >> level
        c[:h, :w] = _haar_synthesis(_haar_synthesis(c[:h, :w], 1), 0)
    return ImageGrid(c)


def grad_xy(u: ImageGrid) -> tuple[ImageGrid, ImageGrid]:
    """Horizontal and vertical periodic forward differences."""
    gx = np.roll(u.data, -1, axis=1) - u.data
    gy = np.roll(u.data, -1, axis=0) - u.data
    return ImageGrid(gx), ImageGrid(gy)


def psnr(u: ImageGrid, ref: ImageGrid, cap: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio for a unit peak.

    Identical inputs give ``math.inf``, or ``cap`` when one is configured.
    """
    _check_same(u, ref)
    mse = float(np.mean((u.data - ref.data) ** 2))
    if mse == 0.0:
        return math.inf if cap is None else float(cap)
    value = 10.0 * math.log10(1.0 / mse)
    return value if cap is None else min(value, float(cap))


def ssim(u: ImageGrid, ref: ImageGrid) -> float:
    """Mean structural similarity over all 8x8 windows and channels, clipped to [0, 1]."""
    _check_same(u, ref)
    if u.height < SSIM_WINDOW or u.width < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    scores = []
    for ch in range(u.channels):
        a = sliding_window_view(u.data[:, :, ch], (SSIM_WINDOW, SSIM_WINDOW))
        b = sliding_window_view(ref.data[:, :, ch], (SSIM_WINDOW, SSIM_WINDOW))
        mu_a = a.mean(axis=(2, 3))
        mu_b = b.mean(axis=(2, 3))
        var_a = a.var(axis=(2, 3))
        var_b = b.var(axis=(2, 3))
        cov = (a * b).mean(axis=(2, 3)) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def resize(u: ImageGrid, height: int, width: int) -> ImageGrid:
    """Bicubic periodic resampling to the requested spatial size."""
    factors = (height / u.height, width / u.width, 1.0)
    out = ndimage.zoom(u.data, factors, order=3, mode="grid-wrap", grid_mode=True)
    return ImageGrid(out[:height, :width])


def pad_wrap(u: ImageGrid, multiple: int) -> ImageGrid:
    """Periodically extend the grid so both spatial sizes are multiples of ``multiple``."""
    ph = (-u.height) % multiple
    pw = (-u.width) % multiple
    if ph == 0 and pw == 0:
        return u
    return ImageGrid(np.pad(u.data, ((0, ph), (0, pw), (0, 0)), mode="wrap"))


def crop(u: ImageGrid, height: int, width: int) -> ImageGrid:
    """Keep the top-left ``height`` x ``width`` block."""
    return ImageGrid(u.data[:height, :width])


def gaussian_kernel(size: int, sigma: float) -> BlurKernel:
    """Isotropic Gaussian kernel of odd ``size``."""
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return BlurKernel.normalized(np.outer(g, g))


def motion_kernel(size: int, angle: float, length: Optional[float] = None) -> BlurKernel:
    """Linear motion kernel through the centre, rasterised by bilinear splatting.

    Args:
        size: odd kernel size.
        angle: direction of motion in radians.
        length: extent of the motion in pixels, defaults to ``size - 1``.
    """
    length = float(size - 1) if length is None else float(length)
    w = np.zeros((size, size))
    c = size // 2
    for s in np.linspace(-length / 2, length / 2, 8 * size):
        y = c + s * math.sin(angle)
        x = c + s * math.cos(angle)
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        fy, fx = y - y0, x - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < size and 0 <= xx < size:
                    w[yy, xx] += wy * wx
    return BlurKernel.normalized(w)


def _check_plane(first: ImageGrid, *others: ImageGrid):
    for other in others:
        if other.data.shape[:2] != first.data.shape[:2]:
            raise DimensionError(
                f"spatial size mismatch: {first.data.shape[:2]} vs {other.data.shape[:2]}"
            )


def _check_same(a: ImageGrid, b: ImageGrid):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
