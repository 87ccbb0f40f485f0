# Copyright 2025 The gdc-propagation authors.

"""Sparsity priors and their proximal operators.

A prior is ``lam * sum(|c|**p)`` over the coefficients ``c`` of the iterate in a frame.
For ``p = 0`` the sum counts nonzero coefficients. The wavelet frame is orthonormal, so
its proximal map is the elementwise shrinkage of the coefficients.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from errors import ConfigError
from grid import ImageGrid, WaveletCoeffs, dwt, idwt

logger = logging.getLogger(__name__)

SUPPORTED_EXPONENTS = (0.0, 0.8, 1.0)

_NEWTON_ITERATIONS = 60


class Frame(Enum):
    """Domain in which the prior measures sparsity."""

    WAVELET = "wavelet"
    IDENTITY = "identity"
    # The iterate itself is a stacked gradient field; shrinkage is pointwise.
    GRADIENT = "gradient"


@dataclass(frozen=True)
class PriorSpec:
    """Weighted ``l_p`` prior with ``p`` in {0, 0.8, 1}."""

    p: float
    lam: float
    frame: Frame = Frame.WAVELET
    levels: int = 1

    def __post_init__(self):
        if float(self.p) not in SUPPORTED_EXPONENTS:
            raise ConfigError(f"unsupported prior exponent p={self.p}")
        if not self.lam >= 0:
            raise ConfigError(f"prior weight must be nonnegative, got {self.lam}")
        if self.levels < 1:
            raise ConfigError(f"wavelet levels must be positive, got {self.levels}")


def _check_exponent(p: float):
    if float(p) not in SUPPORTED_EXPONENTS:
        raise ConfigError(f"unsupported prior exponent p={p}")


def kill_threshold(lam: float, p: float) -> float:
    """Largest ``|x|`` whose proximal value is zero.

    Args:
        lam: prior weight, already divided by the step parameter.
        p: exponent in {0, 0.8, 1}.

    Returns:
        The threshold; inputs at or below it shrink to zero (for ``p = 0`` the
        boundary itself is kept).
    """
    _check_exponent(p)
    if lam == 0:
        return 0.0
    if p == 1.0:
        return lam
    if p == 0.0:
        return math.sqrt(2.0 * lam)
    base = 2.0 * lam * (1.0 - p)
    v_star = base ** (1.0 / (2.0 - p))
    return v_star + lam * p * v_star ** (p - 1.0)


def prox_scalar(
    x: Union[float, np.ndarray], lam: float, p: float
) -> Union[float, np.ndarray]:
    """Minimiser of ``lam * |v|**p + (v - x)**2 / 2``, elementwise.

    The ``p = 0.8`` case zeroes everything up to :func:`kill_threshold` (ties go to
    zero) and otherwise runs Newton's method on the stationarity equation from ``|x|``.
    The iteration decreases monotonically to the largest root because the
    stationarity function is convex in ``v``.

    Raises:
        ConfigError: if ``p`` is not supported or ``lam`` is negative.
    """
    _check_exponent(p)
    if lam < 0:
        raise ConfigError(f"prior weight must be nonnegative, got {lam}")
    scalar = np.isscalar(x)
    a = np.asarray(x, dtype=np.float64)
    if lam == 0:
        out = a.copy()
    elif p == 1.0:
        out = np.sign(a) * np.maximum(np.abs(a) - lam, 0.0)
    elif p == 0.0:
        # x**2 == 2 lam keeps x.
        out = np.where(0.5 * a * a >= lam, a, 0.0)
    else:
        out = np.zeros_like(a)
        mag = np.abs(a)
        alive = mag > kill_threshold(lam, p)
        if np.any(alive):
            target = mag[alive]
            v = target.copy()
            for _ in range(_NEWTON_ITERATIONS):
                g = v - target + lam * p * v ** (p - 1.0)
                dg = 1.0 + lam * p * (p - 1.0) * v ** (p - 2.0)
                step = g / dg
                v = v - step
                if np.max(np.abs(step)) <= 1e-15 * max(1.0, float(np.max(v))):
                    break
            out[alive] = np.sign(a[alive]) * v
    return float(out) if scalar else out


def scalar_objective(v, x, lam: float, p: float):
    """Value of ``lam * |v|**p + (v - x)**2 / 2`` with ``|0|**0 = 0``."""
    v = np.asarray(v, dtype=np.float64)
    penalty = (v != 0).astype(np.float64) if p == 0.0 else np.abs(v) ** p
    return lam * penalty + 0.5 * (v - x) ** 2


def analysis(u: ImageGrid, spec: PriorSpec) -> np.ndarray:
    """Frame coefficients of ``u`` on which the prior acts."""
    if spec.frame is Frame.WAVELET:
        return dwt(u, spec.levels).coeffs
    return u.data


def synthesis(coeffs: np.ndarray, spec: PriorSpec) -> ImageGrid:
    """Inverse of :func:`analysis`."""
    if spec.frame is Frame.WAVELET:
        return idwt(WaveletCoeffs(coeffs, spec.levels))
    return ImageGrid(coeffs)


def prior_value(u: ImageGrid, spec: PriorSpec) -> float:
    """Evaluate ``phi(u)``."""
    if spec.lam == 0:
        return 0.0
    c = analysis(u, spec)
    if spec.p == 0.0:
        return spec.lam * float(np.count_nonzero(c))
    return spec.lam * float(np.sum(np.abs(c) ** spec.p))


def prox_prior(u: ImageGrid, spec: PriorSpec, gamma: float) -> ImageGrid:
    """Proximal map ``argmin_v phi(v) + (gamma / 2) * ||v - u||**2``.

    Channels are processed independently. For the wavelet frame this is
    ``B(prox(B^T u))`` with the effective weight ``lam / gamma``.

    Raises:
        ValueError: if ``gamma`` is not positive.
        DimensionError: if the wavelet frame does not fit the image size.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if spec.lam == 0:
        return u
    coeffs = analysis(u, spec)
    shrunk = prox_scalar(coeffs, spec.lam / gamma, spec.p)
    return synthesis(np.asarray(shrunk), spec)
