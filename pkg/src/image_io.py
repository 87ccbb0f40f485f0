# Copyright 2025 The gdc-propagation authors.

"""Reading and writing of images, masks and kernel files."""

import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from errors import ConfigError, DimensionError
from grid import BlurKernel, ImageGrid

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

_FORMATS = {".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM", ".png": "PNG"}


def atomic_write(path: PathLike, payload: Union[bytes, str]) -> Path:
    """Write ``payload`` to a temporary sibling file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode() if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def load_image(path: PathLike) -> ImageGrid:
    """Load an 8-bit grey or colour image scaled to [0, 1].

    Args:
        path: a PGM (P5), PPM (P6) or PNG file.

    Returns:
        A one-channel grid for grey images, three channels otherwise.
    """
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if "A" in img.mode or img.mode == "P" else "L")
        array = np.asarray(img, dtype=np.float64) / 255.0
    logger.debug("Loaded %s with shape %s", path, array.shape)
    return ImageGrid(array)


def save_image(path: PathLike, u: ImageGrid) -> Path:
    """Quantise ``u`` to 8 bits and write it atomically.

    The format follows the suffix: ``.pgm``/``.ppm`` give binary netpbm, ``.png`` PNG.
    """
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ConfigError(f"unsupported image suffix: {path.suffix}")
    if u.channels not in (1, 3):
        raise DimensionError(f"cannot store an image with {u.channels} channels")
    pixels = np.round(np.clip(u.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(pixels[:, :, 0] if u.channels == 1 else pixels)
    buffer = io.BytesIO()
    img.save(buffer, format=fmt)
    return atomic_write(path, buffer.getvalue())


def load_mask(path: PathLike) -> ImageGrid:
    """Load an occlusion mask; pixels above mid-grey are observed (1), the rest missing (0)."""
    u = load_image(path)
    return ImageGrid((u.data[:, :, :1] > 0.5).astype(np.float64))


def load_kernel(path: PathLike) -> BlurKernel:
    """Parse an ASCII kernel file and renormalise it onto the simplex.

    The first line holds ``kh kw``; the remaining tokens are the row-major weights.
    """
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise ConfigError(f"{path}: missing kernel header")
    try:
        kh, kw = int(tokens[0]), int(tokens[1])
        values = [float(t) for t in tokens[2:]]
    except ValueError as e:
        raise ConfigError(f"{path}: malformed kernel file: {e}") from None
    if len(values) != kh * kw:
        raise DimensionError(f"{path}: expected {kh * kw} weights, found {len(values)}")
    return BlurKernel.normalized(np.array(values).reshape(kh, kw))


def save_kernel(path: PathLike, k: BlurKernel) -> Path:
    """Write a kernel file readable by :func:`load_kernel`."""
    kh, kw = k.size
    rows = [" ".join(repr(float(v)) for v in row) for row in k.weights]
    return atomic_write(path, f"{kh} {kw}\n" + "\n".join(rows) + "\n")
