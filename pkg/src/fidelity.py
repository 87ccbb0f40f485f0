# Copyright 2025 The gdc-propagation authors.

"""Data fidelity terms ``f`` with gradients, curvature bounds and penalized solvers.

Fidelities carry no one-half factor: ``f(u) = ||A u - y||**2``, so ``grad f = 2 A^T (A u - y)``
and the gradient-Lipschitz constant of the identity fidelity is 2.
"""

import logging
from abc import ABC, abstractmethod
from enum import Enum

import numpy as np
from scipy import fft as sfft

from errors import DimensionError
from grid import BlurKernel, ImageGrid, grad_xy

logger = logging.getLogger(__name__)


class FidelityKind(Enum):
    """Formulation of the data term."""

    IDENTITY = "identity"
    INTERP = "interp"
    DECONV = "deconv"
    GRADIENT_DOMAIN = "gradient_domain"


class Fidelity(ABC):
    """Smooth convex data term around an observation ``y``."""

    kind: FidelityKind

    def __init__(self, y: ImageGrid):
        self.y = y

    def _check(self, u: ImageGrid):
        if u.shape != self.y.shape:
            raise DimensionError(f"iterate shape {u.shape} does not match data {self.y.shape}")

    @abstractmethod
    def evaluate(self, u: ImageGrid) -> float:
        """Return ``f(u)``."""

    @abstractmethod
    def gradient(self, u: ImageGrid) -> ImageGrid:
        """Return ``grad f(u)``."""

    @abstractmethod
    def lipschitz(self) -> float:
        """Lipschitz constant L of the gradient."""

    @abstractmethod
    def strong_convexity(self) -> float:
        """Strong convexity modulus rho; 0 when ``f`` is merely convex."""

    @abstractmethod
    def penalized_solve(self, u_d: ImageGrid, gamma: float) -> ImageGrid:
        """Exact minimiser of ``f(u) + (gamma / 2) * ||u - u_d||**2``."""

    def penalized_objective(self, u: ImageGrid, u_d: ImageGrid, gamma: float) -> float:
        """Value of the penalized problem solved by :meth:`penalized_solve`."""
        return self.evaluate(u) + 0.5 * gamma * (u - u_d).norm() ** 2


def _check_gamma(gamma: float):
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")


class IdentityFidelity(Fidelity):
    """``f(u) = ||u - y||**2``."""

    kind = FidelityKind.IDENTITY

    def evaluate(self, u: ImageGrid) -> float:
        self._check(u)
        return (u - self.y).norm() ** 2

    def gradient(self, u: ImageGrid) -> ImageGrid:
        self._check(u)
        return 2.0 * (u - self.y)

    def lipschitz(self) -> float:
        return 2.0

    def strong_convexity(self) -> float:
        return 2.0

    def penalized_solve(self, u_d: ImageGrid, gamma: float) -> ImageGrid:
        _check_gamma(gamma)
        self._check(u_d)
        return (2.0 * self.y + gamma * u_d) / (2.0 + gamma)


class InterpFidelity(Fidelity):
    """``f(u) = ||M * u - M * y||**2`` for a binary occlusion mask ``M``.

    The mask has one channel, broadcast over the image channels, or as many channels
    as the image. Unobserved pixels of ``y`` are zeroed at construction.
    """

    kind = FidelityKind.INTERP

    def __init__(self, y: ImageGrid, mask: ImageGrid):
        if mask.data.shape[:2] != y.data.shape[:2] or mask.channels not in (1, y.channels):
            raise DimensionError(f"mask shape {mask.shape} does not match image {y.shape}")
        m = mask.data
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("interpolation mask must be binary")
        self.mask = np.broadcast_to(m, y.shape).copy()
        super().__init__(ImageGrid(y.data * self.mask))

    def evaluate(self, u: ImageGrid) -> float:
        self._check(u)
        return float(np.sum((self.mask * u.data - self.y.data) ** 2))

    def gradient(self, u: ImageGrid) -> ImageGrid:
        self._check(u)
        return ImageGrid(2.0 * self.mask * (self.mask * u.data - self.y.data))

    def lipschitz(self) -> float:
        return 2.0

    def strong_convexity(self) -> float:
        return 2.0 if bool(np.all(self.mask == 1.0)) else 0.0

    def penalized_solve(self, u_d: ImageGrid, gamma: float) -> ImageGrid:
        _check_gamma(gamma)
        self._check(u_d)
        m = self.mask
        return ImageGrid((2.0 * m * self.y.data + gamma * u_d.data) / (2.0 * m + gamma))


class DeconvFidelity(Fidelity):
    """``f(u) = ||k * u - y||**2`` with periodic convolution, diagonal in Fourier."""

    kind = FidelityKind.DECONV

    def __init__(self, y: ImageGrid, kernel: BlurKernel):
        super().__init__(y)
        self.kernel = kernel
        self.otf = kernel.otf(y.height, y.width)[:, :, np.newaxis]
        self._power = np.abs(self.otf) ** 2
        self._y_hat = sfft.fft2(y.data, axes=(0, 1))

    def _apply(self, data: np.ndarray, transfer: np.ndarray) -> np.ndarray:
        return sfft.ifft2(sfft.fft2(data, axes=(0, 1)) * transfer, axes=(0, 1)).real

    def residual(self, u: ImageGrid) -> np.ndarray:
        """``k * u - y`` as a raw array."""
        self._check(u)
        return self._apply(u.data, self.otf) - self.y.data

    def evaluate(self, u: ImageGrid) -> float:
        return float(np.sum(self.residual(u) ** 2))

    def gradient(self, u: ImageGrid) -> ImageGrid:
        return ImageGrid(2.0 * self._apply(self.residual(u), np.conj(self.otf)))

    def lipschitz(self) -> float:
        return 2.0 * float(self._power.max())

    def strong_convexity(self) -> float:
        return 2.0 * float(self._power.min())

    def penalized_solve(self, u_d: ImageGrid, gamma: float) -> ImageGrid:
        _check_gamma(gamma)
        self._check(u_d)
        numerator = 2.0 * np.conj(self.otf) * self._y_hat + gamma * sfft.fft2(
            u_d.data, axes=(0, 1)
        )
        solution = sfft.ifft2(numerator / (2.0 * self._power + gamma), axes=(0, 1)).real
        return ImageGrid(solution)


class GradientDomainFidelity(DeconvFidelity):
    """Deconvolution of a stacked (horizontal, vertical) gradient field.

    The iterate has twice the channels of the image: first the horizontal differences of
    every channel, then the vertical ones. Both share the blur kernel because periodic
    differences commute with periodic convolution.
    """

    kind = FidelityKind.GRADIENT_DOMAIN

    @classmethod
    def from_image(cls, y: ImageGrid, kernel: BlurKernel) -> "GradientDomainFidelity":
        """Build the fidelity from the gradients of a blurred image."""
        return cls(ImageGrid.stack(grad_xy(y)), kernel)
