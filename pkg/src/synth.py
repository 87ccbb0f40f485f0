# Copyright 2025 The gdc-propagation authors.

"""Synthetic images, degradations and dataset directories."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from config import stream
from errors import ConfigError
from grid import BlurKernel, ImageGrid, conv2d_circular, gaussian_kernel, motion_kernel
from image_io import load_image, load_kernel, load_mask, save_image, save_kernel

logger = logging.getLogger(__name__)

SYNTH_KINDS = ("noise", "blur", "mask", "text_mask", "rain")

IMAGE_SUFFIXES = (".pgm", ".ppm", ".png")
MASK_SUFFIX = ".mask.pgm"
KERNEL_SUFFIX = ".kernel"


@dataclass
class Sample:
    """One degraded observation with its optional operators and reference."""

    name: str
    degraded: ImageGrid
    clean: Optional[ImageGrid] = None
    kernel: Optional[BlurKernel] = None
    mask: Optional[ImageGrid] = None


def smooth_image(size: int, rng: np.random.Generator) -> ImageGrid:
    """Random linear ramp plus a low-frequency wave, inside [0, 1]."""
    y, x = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.uniform(-0.4, 0.4, 2)
    fx, fy = rng.uniform(0.5, 1.5, 2)
    phase = rng.uniform(0, 2 * math.pi)
    img = 0.5 + gx * (x - 0.5) + gy * (y - 0.5)
    img += 0.1 * np.sin(2 * math.pi * (fx * x + fy * y) + phase)
    return ImageGrid(np.clip(img, 0.0, 1.0))


def synthetic_image(size: int, rng: np.random.Generator, shapes: int = 6) -> ImageGrid:
    """Piecewise-smooth test image: a smooth background with flat rectangles and discs."""
    img = np.array(smooth_image(size, rng).data[:, :, 0])
    y, x = np.mgrid[0:size, 0:size]
    for _ in range(shapes):
        value = rng.uniform(0.05, 0.95)
        if rng.random() < 0.5:
            top, left = rng.integers(0, size - 4, 2)
            h, w = rng.integers(4, max(5, size // 2), 2)
            img[top : top + h, left : left + w] = value
        else:
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(3, max(4, size / 5))
            img[(y - cy) ** 2 + (x - cx) ** 2 <= r * r] = value
    return ImageGrid(np.clip(img, 0.0, 1.0))


def add_noise(u: ImageGrid, sigma: float, rng: np.random.Generator) -> ImageGrid:
    """Add Gaussian noise with standard deviation ``sigma`` percent of the [0, 1] range."""
    if not 0 <= sigma < 100:
        raise ConfigError(f"noise level must lie in [0, 100), got {sigma}")
    return u + ImageGrid((sigma / 100.0) * rng.standard_normal(u.shape))


def random_mask(height: int, width: int, missing_rate: float, rng: np.random.Generator):
    """Binary mask with each pixel missing (0) with probability ``missing_rate``."""
    if not 0 <= missing_rate < 1:
        raise ConfigError(f"missing rate must lie in [0, 1), got {missing_rate}")
    return ImageGrid((rng.random((height, width)) >= missing_rate).astype(np.float64))


def text_mask(height: int, width: int, rng: np.random.Generator, lines: int = 0) -> ImageGrid:
    """Mask whose missing pixels are rendered text."""
    canvas = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    lines = lines or max(1, height // 12)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz0123456789"))
    for i in range(lines):
        text = "".join(rng.choice(letters, size=max(4, width // 6)))
        top = int(i * height / lines + rng.integers(0, 3))
        draw.text((int(rng.integers(0, 4)), top), text, fill=0, font=font)
    return ImageGrid((np.asarray(canvas) > 127).astype(np.float64))


def rain_streaks(u: ImageGrid, density: float, rng: np.random.Generator) -> ImageGrid:
    """Add bright, nearly vertical streaks seeded at a fraction ``density`` of the pixels."""
    if not 0 <= density < 1:
        raise ConfigError(f"rain density must lie in [0, 1), got {density}")
    plane = (u.height, u.width)
    seeds = (rng.random(plane) < density) * rng.uniform(0.5, 1.0, plane)
    size = min(15, u.height - (1 - u.height % 2), u.width - (1 - u.width % 2))
    angle = math.pi / 2 + rng.uniform(-0.2, 0.2)
    streak = motion_kernel(size, angle)
    layer = conv2d_circular(ImageGrid(seeds), streak).data * size * 0.5
    return ImageGrid(np.clip(u.data + layer, 0.0, 1.0))


def degrade(
    clean: ImageGrid,
    kind: str,
    rng: np.random.Generator,
    sigma: float = 2.0,
    missing_rate: float = 0.6,
    blur_size: int = 5,
    blur_sigma: float = 1.2,
    rain_density: float = 0.01,
    name: str = "",
) -> Sample:
    """Apply one synthetic degradation and return the observation with its operators.

    Every kind also adds Gaussian noise of level ``sigma`` (percent) except ``rain``.
    """
    match kind:
        case "noise":
            return Sample(name, add_noise(clean, sigma, rng), clean)
        case "blur":
            k = gaussian_kernel(blur_size, blur_sigma)
            return Sample(name, add_noise(conv2d_circular(clean, k), sigma, rng), clean, kernel=k)
        case "mask" | "text_mask":
            if kind == "mask":
                m = random_mask(clean.height, clean.width, missing_rate, rng)
            else:
                m = text_mask(clean.height, clean.width, rng)
            noisy = add_noise(clean, sigma, rng)
            return Sample(name, ImageGrid(noisy.data * m.data), clean, mask=m)
        case "rain":
            return Sample(name, rain_streaks(clean, rain_density, rng), clean)
    raise ConfigError(f"unknown synthetic kind '{kind}', expected one of {SYNTH_KINDS}")


def synthetic_suite(
    count: int, size: int, seed: int, kind: str = "blur", **params
) -> list[Sample]:
    """Seeded list of degraded synthetic images.

    Clean images come from the ``init`` stream, degradations from ``noise`` (or ``mask``
    for masks), so changing the degradation leaves the clean images unchanged.
    """
    image_rng = stream(seed, "init")
    degrade_rng = stream(seed, "mask" if kind in ("mask", "text_mask") else "noise")
    samples = []
    for i in range(count):
        clean = synthetic_image(size, image_rng)
        samples.append(degrade(clean, kind, degrade_rng, name=f"img{i:03d}", **params))
    return samples


def write_dataset(directory: Union[str, Path], samples: Sequence[Sample]) -> Path:
    """Write observations, kernels, masks and ``gt/`` references with atomic renames."""
    directory = Path(directory)
    for s in samples:
        save_image(directory / f"{s.name}.pgm", s.degraded.clip())
        if s.clean is not None:
            save_image(directory / "gt" / f"{s.name}.pgm", s.clean)
        if s.kernel is not None:
            save_kernel(directory / f"{s.name}{KERNEL_SUFFIX}", s.kernel)
        if s.mask is not None:
            save_image(directory / f"{s.name}{MASK_SUFFIX}", s.mask)
    logger.info("Wrote %d samples to %s", len(samples), directory)
    return directory


def read_dataset(directory: Union[str, Path]) -> list[Sample]:
    """Load a dataset directory written by :func:`write_dataset` or laid out the same way."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"dataset directory {directory} does not exist")
    samples = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES or path.name.endswith(MASK_SUFFIX):
            continue
        name = path.stem
        kernel_path = directory / f"{name}{KERNEL_SUFFIX}"
        mask_path = directory / f"{name}{MASK_SUFFIX}"
        gt = [directory / "gt" / f"{name}{suffix}" for suffix in IMAGE_SUFFIXES]
        gt_path = next((p for p in gt if p.exists()), None)
        samples.append(
            Sample(
                name,
                load_image(path),
                load_image(gt_path) if gt_path else None,
                load_kernel(kernel_path) if kernel_path.exists() else None,
                load_mask(mask_path) if mask_path.exists() else None,
            )
        )
    if not samples:
        raise ConfigError(f"no images found in {directory}")
    return samples
