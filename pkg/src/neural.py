# Copyright 2025 The gdc-propagation authors.

"""Learnable generative and discriminative modules.

Both are small stacks of periodic 3x3 convolutions with explicit forward and backward
passes. The generative module (GM) predicts a residual added to its input. The
discriminative module (DM) scores how degraded an image looks; propagation follows the
negative input gradient of that score.
"""

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from config import stream
from errors import CheckpointError, ConfigError, TrainingError
from grid import ImageGrid
from image_io import atomic_write

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_D = 0.1
DEFAULT_WIDTH = 16

CHECKPOINT_MAGIC = b"GDCW"
CHECKPOINT_VERSION = 1

_LAST_LAYER_SCALE = 0.01


class Role(Enum):
    """What a module is used for in the cascade."""

    GM = "gm"
    DM = "dm"


class Loss(Enum):
    """Training criterion."""

    MSE = "mse"
    LOGISTIC = "logistic"


@dataclass
class ConvLayer:
    """Periodic convolution with bias and optional ReLU.

    ``weight`` has shape (out, in, kh, kw); the layer computes the cross-correlation
    ``out[o](x) = sum_{c,i,j} weight[o, c, i, j] * in[c](x + (i, j) - centre) + bias[o]``.
    """

    weight: np.ndarray
    bias: np.ndarray
    relu: bool = True

    @property
    def in_channels(self) -> int:
        """Input feature channels."""
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        """Output feature channels."""
        return self.weight.shape[0]

    @property
    def taps(self) -> int:
        """Number of spatial taps per filter."""
        return self.weight.shape[2] * self.weight.shape[3]

    def matricized(self) -> np.ndarray:
        """The (out, in * kh * kw) weight matrix."""
        return self.weight.reshape(self.out_channels, -1)

    def copy(self) -> "ConvLayer":
        """Deep copy."""
        return ConvLayer(self.weight.copy(), self.bias.copy(), self.relu)


@dataclass
class ANState:
    """Architecture normalization target and warm-start vectors of the power iteration."""

    delta: float
    vectors: list[np.ndarray] = field(default_factory=list)


@dataclass
class ConvNetModule:
    """Ordered convolution layers serving as GM or DM."""

    layers: list[ConvLayer]
    role: Role
    an_state: Optional[ANState] = None

    @property
    def in_channels(self) -> int:
        """Channels the first layer consumes."""
        return self.layers[0].in_channels

    @property
    def depth(self) -> int:
        """Number of convolution layers."""
        return len(self.layers)

    def copy(self) -> "ConvNetModule":
        """Deep copy."""
        an_state = None
        if self.an_state is not None:
            an_state = ANState(self.an_state.delta, [z.copy() for z in self.an_state.vectors])
        return ConvNetModule([layer.copy() for layer in self.layers], self.role, an_state)

    def parameters(self) -> list[np.ndarray]:
        """Weight and bias arrays in layer order."""
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]


@dataclass(frozen=True)
class TrainConfig:
    """Greedy training settings of a single module."""

    noise_levels: tuple[float, ...] = (2.0,)
    patch_size: int = 32
    epochs: int = 30
    step_size: float = 0.01
    batch_size: int = 8
    seed: int = 0
    loss: Loss = Loss.MSE

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError(f"step size must be positive, got {self.step_size}")
        if not self.noise_levels or any(not 0 < s < 100 for s in self.noise_levels):
            raise ConfigError(f"noise levels must lie in (0, 100), got {self.noise_levels}")
        if self.epochs < 0 or self.batch_size < 1 or self.patch_size < 3:
            raise ConfigError("epochs, batch size and patch size are out of range")


@dataclass
class TrainingResult:
    """Trained module with the corpus loss before training and after every epoch."""

    module: ConvNetModule
    losses: list[float]
    accuracy: Optional[float] = None


@dataclass
class LipschitzEstimate:
    """Empirical ratios ``||N(a) - N(b)|| / ||a - b||`` over random pairs."""

    max_ratio: float
    ratios: np.ndarray
    histogram: tuple[np.ndarray, np.ndarray]


# Layers and networks


def _layer(rng: np.random.Generator, c_in: int, c_out: int, relu: bool, scale: float = 1.0):
    std = math.sqrt(2.0 / (c_in * 9)) * scale
    return ConvLayer(rng.normal(0.0, std, (c_out, c_in, 3, 3)), np.zeros(c_out), relu)


def make_gm(
    channels: int = 1, width: int = DEFAULT_WIDTH, depth: int = 7, seed: int = 0
) -> ConvNetModule:
    """Residual generator: ``depth`` convolutions with a ReLU after all but the last.

    The last layer starts close to zero so the untrained module is nearly the identity map.
    """
    if depth < 2:
        raise ConfigError(f"GM depth must be at least 2, got {depth}")
    rng = stream(seed, "init")
    layers = [_layer(rng, channels, width, True)]
    layers += [_layer(rng, width, width, True) for _ in range(depth - 2)]
    layers.append(_layer(rng, width, channels, False, _LAST_LAYER_SCALE))
    return ConvNetModule(layers, Role.GM)


def make_dm(
    channels: int = 1, width: int = DEFAULT_WIDTH, depth: int = 3, seed: int = 0
) -> ConvNetModule:
    """Discriminator producing a one-channel map whose global mean is the score.

    First-layer filters start with zero mean so the initial responses ignore intensity.
    """
    if depth < 2:
        raise ConfigError(f"DM depth must be at least 2, got {depth}")
    rng = stream(seed, "init")
    first = _layer(rng, channels, width, True)
    first.weight -= first.weight.mean(axis=(2, 3), keepdims=True)
    layers = [first]
    layers += [_layer(rng, width, width, True) for _ in range(depth - 2)]
    layers.append(_layer(rng, width, 1, False))
    return ConvNetModule(layers, Role.DM)


def zero_module(role: Role, channels: int = 1, width: int = DEFAULT_WIDTH) -> ConvNetModule:
    """Module with every weight and bias zero; the cascade treats it as a no-op."""
    m = make_gm(channels, width) if role is Role.GM else make_dm(channels, width)
    for layer in m.layers:
        layer.weight[...] = 0.0
        layer.bias[...] = 0.0
    return m


def _shifts(kh: int, kw: int):
    for i in range(kh):
        for j in range(kw):
            yield i - kh // 2, j - kw // 2


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    cols = np.stack(
        [np.roll(x, (-di, -dj), axis=(1, 2)) for di, dj in _shifts(kh, kw)], axis=-1
    )
    return cols.reshape(n, h, w, c * kh * kw)


def _col2im(dcols: np.ndarray, c: int, kh: int, kw: int) -> np.ndarray:
    n, h, w, _ = dcols.shape
    d = dcols.reshape(n, h, w, c, kh * kw)
    dx = np.zeros((n, h, w, c))
    for idx, (di, dj) in enumerate(_shifts(kh, kw)):
        dx += np.roll(d[..., idx], (di, dj), axis=(1, 2))
    return dx


def forward(m: ConvNetModule, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Run the network on a batch.

    Args:
        m: the module.
        x: inputs of shape (N, H, W, C).

    Returns:
        The final feature map and the cache needed by :func:`backward`.
    """
    cache = []
    a = x
    for layer in m.layers:
        kh, kw = layer.weight.shape[2:]
        cols = _im2col(a, kh, kw)
        pre = cols @ layer.matricized().T + layer.bias
        cache.append((cols, pre))
        a = np.maximum(pre, 0.0) if layer.relu else pre
    return a, cache


def backward(
    m: ConvNetModule, cache: list, dout: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Back-propagate ``dout`` through the network.

    Returns:
        The input gradient and the parameter gradients in :meth:`ConvNetModule.parameters`
        order.
    """
    grads: list[np.ndarray] = []
    d = dout
    for layer, (cols, pre) in zip(reversed(m.layers), reversed(cache)):
        if layer.relu:
            d = d * (pre > 0)
        flat = d.reshape(-1, layer.out_channels)
        dw = (flat.T @ cols.reshape(-1, cols.shape[-1])).reshape(layer.weight.shape)
        grads = [dw, flat.sum(axis=0)] + grads
        kh, kw = layer.weight.shape[2:]
        d = _col2im(d @ layer.matricized(), layer.in_channels, kh, kw)
    return d, grads


def _to_batch(m: ConvNetModule, u: ImageGrid) -> np.ndarray:
    if u.channels == m.in_channels:
        return u.data[np.newaxis]
    if m.in_channels == 1:
        return np.moveaxis(u.data, 2, 0)[:, :, :, np.newaxis]
    raise ConfigError(f"module expects {m.in_channels} channels, got {u.channels}")


def _from_batch(m: ConvNetModule, batch: np.ndarray, channels: int) -> np.ndarray:
    if channels == m.in_channels:
        return batch[0]
    return np.moveaxis(batch[:, :, :, 0], 0, 2)


def _require(m: ConvNetModule, role: Role):
    if m.role is not role:
        raise ConfigError(f"expected a {role.value.upper()} module, got {m.role.value.upper()}")


def network(m: ConvNetModule, u: ImageGrid) -> ImageGrid:
    """Raw GM residual ``G(u)``; a one-channel module runs on every channel."""
    _require(m, Role.GM)
    out, _ = forward(m, _to_batch(m, u))
    return ImageGrid(_from_batch(m, out, u.channels))


def gm_apply(m: ConvNetModule, u: ImageGrid) -> ImageGrid:
    """Generative update ``u + G(u)``."""
    return u + network(m, u)


def dm_score(m: ConvNetModule, u: ImageGrid) -> float:
    """Discriminator score, the global mean of the final map averaged over channels."""
    _require(m, Role.DM)
    out, _ = forward(m, _to_batch(m, u))
    return float(out.mean())


def dm_gradient(m: ConvNetModule, u: ImageGrid) -> ImageGrid:
    """Input gradient of the summed per-channel scores."""
    _require(m, Role.DM)
    batch = _to_batch(m, u)
    out, cache = forward(m, batch)
    dout = np.full(out.shape, 1.0 / (out.shape[1] * out.shape[2]))
    dx, _ = backward(m, cache, dout)
    return ImageGrid(_from_batch(m, dx, u.channels))


def dm_apply(m: ConvNetModule, u: ImageGrid, alpha_d: float = DEFAULT_ALPHA_D) -> ImageGrid:
    """Discriminative update ``u - alpha_d * d(score)/du``."""
    if not alpha_d > 0:
        raise ConfigError(f"alpha_d must be positive, got {alpha_d}")
    return u - alpha_d * dm_gradient(m, u)


# Training


def batch_loss(
    m: ConvNetModule, inputs: np.ndarray, targets: np.ndarray, loss: Loss
) -> tuple[float, list[np.ndarray]]:
    """Loss over a batch and its parameter gradients.

    For MSE the targets are residual maps; for the logistic loss they are labels
    (1 degraded, 0 clean) and the logits are the per-sample scores.
    """
    out, cache = forward(m, inputs)
    match loss:
        case Loss.MSE:
            diff = out - targets
            value = float(np.mean(diff**2))
            dout = 2.0 * diff / diff.size
        case Loss.LOGISTIC:
            logits = out.mean(axis=(1, 2, 3))
            value = float(np.mean(np.logaddexp(0.0, logits) - targets * logits))
            dlogit = (_sigmoid(logits) - targets) / len(logits)
            dout = np.broadcast_to(
                dlogit[:, None, None, None] / (out.shape[1] * out.shape[2] * out.shape[3]),
                out.shape,
            )
    _, grads = backward(m, cache, dout)
    return value, grads


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _patches(corpus: Sequence[ImageGrid], cfg: TrainConfig, channels: int) -> np.ndarray:
    rng = stream(cfg.seed, "shuffle")
    out = []
    for img in corpus:
        size = min(cfg.patch_size, img.height, img.width)
        top = int(rng.integers(0, img.height - size + 1))
        left = int(rng.integers(0, img.width - size + 1))
        block = img.data[top : top + size, left : left + size]
        if channels == img.channels:
            out.append(block)
        else:
            out.extend(block[:, :, c : c + 1] for c in range(img.channels))
    sizes = {p.shape for p in out}
    if len(sizes) != 1:
        raise ConfigError(f"corpus patches have different shapes: {sorted(sizes)}")
    return np.stack(out)


def _noisy(clean: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    rng = stream(cfg.seed, "noise")
    sigma = rng.choice(np.asarray(cfg.noise_levels), size=len(clean)) / 100.0
    return clean + sigma[:, None, None, None] * rng.standard_normal(clean.shape)


def _full_loss(m: ConvNetModule, inputs, targets, cfg: TrainConfig) -> float:
    total = 0.0
    for start in range(0, len(inputs), cfg.batch_size):
        stop = start + cfg.batch_size
        value, _ = batch_loss(m, inputs[start:stop], targets[start:stop], cfg.loss)
        total += value * len(inputs[start:stop])
    return total / len(inputs)


def _sgd(
    m: ConvNetModule, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig
) -> list[float]:
    rng = stream(cfg.seed, "shuffle")
    losses = [_full_loss(m, inputs, targets, cfg)]
    logger.info("Training %s: initial loss %.6g", m.role.value, losses[0])
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(inputs))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = batch_loss(m, inputs[idx], targets[idx], cfg.loss)
            for param, grad in zip(m.parameters(), grads):
                param -= cfg.step_size * grad
        loss = _full_loss(m, inputs, targets, cfg)
        if not math.isfinite(loss):
            raise TrainingError(epoch)
        losses.append(loss)
        logger.debug("Epoch %d: loss %.6g", epoch, loss)
    logger.info("Training %s finished: loss %.6g", m.role.value, losses[-1])
    return losses


def train_gm(m: ConvNetModule, corpus: Sequence[ImageGrid], cfg: TrainConfig) -> TrainingResult:
    """Fit the GM residual to ``clean - noisy`` on noisy patches of a clean corpus.

    The module passed in is left untouched; training works on a copy.

    Raises:
        ConfigError: if the corpus is empty or the module is not a GM.
        TrainingError: if the loss stops being finite.
    """
    _require(m, Role.GM)
    if not corpus:
        raise ConfigError("training corpus is empty")
    cfg = replace(cfg, loss=Loss.MSE)
    clean = _patches(corpus, cfg, m.in_channels)
    noisy = _noisy(clean, cfg)
    trained = m.copy()
    losses = _sgd(trained, noisy, clean - noisy, cfg)
    return TrainingResult(trained, losses)


def train_dm(m: ConvNetModule, corpus: Sequence[ImageGrid], cfg: TrainConfig) -> TrainingResult:
    """Train the DM as a logistic classifier of noisy (label 1) against clean (label 0) patches.

    Raises:
        ConfigError: if the corpus is empty or the module is not a DM.
        TrainingError: if the loss stops being finite.
    """
    _require(m, Role.DM)
    if not corpus:
        raise ConfigError("training corpus is empty")
    cfg = replace(cfg, loss=Loss.LOGISTIC)
    clean = _patches(corpus, cfg, m.in_channels)
    inputs = np.concatenate([clean, _noisy(clean, cfg)])
    labels = np.concatenate([np.zeros(len(clean)), np.ones(len(clean))])
    trained = m.copy()
    losses = _sgd(trained, inputs, labels, cfg)
    accuracy = dm_accuracy(trained, inputs, labels)
    logger.info("DM training accuracy %.3f", accuracy)
    return TrainingResult(trained, losses, accuracy)


def dm_accuracy(m: ConvNetModule, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose score sign matches the label (positive means degraded)."""
    out, _ = forward(m, inputs)
    predicted = (out.mean(axis=(1, 2, 3)) > 0).astype(np.float64)
    return float(np.mean(predicted == labels))


# Architecture normalization


def spectral_norm(
    matrix: np.ndarray,
    z: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    max_iters: int = 200,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Largest singular value by the accelerated power iteration.

    The estimate ``||W W^T z|| / ||W^T z||`` is refined with ``z <- W W^T z / ||W W^T z||``
    until its relative change drops below ``tol``.

    Args:
        matrix: the (m, n) matrix.
        z: warm-start vector of length m; a Gaussian draw when omitted.
        tol: relative change at which iteration stops.
        max_iters: iteration cap.
        seed: seed of the ``probe`` stream used for the initial draw.

    Returns:
        The estimate and the final vector, to be reused as the next warm start.
    """
    if z is None or z.shape != (matrix.shape[0],) or not np.any(z):
        z = stream(seed, "probe").standard_normal(matrix.shape[0])
    z = z / np.linalg.norm(z)
    rho = 0.0
    for _ in range(max_iters):
        wz = matrix.T @ z
        denom = np.linalg.norm(wz)
        if denom == 0.0:
            return 0.0, z
        wwz = matrix @ wz
        estimate = float(np.linalg.norm(wwz) / denom)
        z = wwz / np.linalg.norm(wwz)
        converged = abs(estimate - rho) <= tol * estimate
        rho = estimate
        if converged:
            break
    return rho, z


def an_normalize(
    m: ConvNetModule, delta: float, tol: float = 1e-6, max_iters: int = 200
) -> ConvNetModule:
    """Rescale every layer so the module is ``delta``-Lipschitz.

    Each layer's operator norm is bounded by ``sqrt(kh * kw)`` times the spectral norm of
    its matricized kernel, and the layer is scaled so the bound equals
    ``delta ** (1 / K)``. Biases follow the cumulative scale, so a ReLU network becomes an
    exact positive multiple of the original. Layers with zero weights are left alone.

    Raises:
        ConfigError: if ``delta`` is outside (0, 1].
    """
    if not 0 < delta <= 1:
        raise ConfigError(f"delta must lie in (0, 1], got {delta}")
    out = m.copy()
    target = delta ** (1.0 / out.depth)
    previous = m.an_state.vectors if m.an_state else []
    vectors = []
    cumulative = 1.0
    for k, layer in enumerate(out.layers):
        warm = previous[k] if k < len(previous) else None
        rho, z = spectral_norm(layer.matricized(), warm, tol, max_iters, seed=k)
        vectors.append(z)
        bound = math.sqrt(layer.taps) * rho
        factor = target / bound if bound > 0 else 1.0
        cumulative *= factor
        layer.weight *= factor
        layer.bias *= cumulative
        logger.debug("AN layer %d: rho %.6g, factor %.6g", k, rho, factor)
    out.an_state = ANState(delta, vectors)
    return out


def estimate_lipschitz(
    m: ConvNetModule,
    samples: int = 1000,
    seed: int = 0,
    size: int = 16,
    bins: int = 20,
) -> LipschitzEstimate:
    """Empirical Lipschitz ratios of the GM residual or the DM score gradient.

    Pairs are ``(a, a + s * e)`` with ``a`` uniform in [0, 1], ``e`` a unit-RMS Gaussian
    direction and ``s`` log-uniform in [1e-3, 1e-1].
    """
    if samples < 1:
        raise ConfigError(f"samples must be positive, got {samples}")
    rng = stream(seed, "probe")
    c = m.in_channels
    ratios = np.empty(samples)
    chunk = 50
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        a = rng.uniform(0.0, 1.0, (n, size, size, c))
        e = rng.standard_normal((n, size, size, c))
        e /= np.sqrt(np.mean(e**2, axis=(1, 2, 3), keepdims=True))
        scale = 10.0 ** rng.uniform(-3.0, -1.0, n)
        b = a + scale[:, None, None, None] * e
        na, nb = _batch_map(m, a), _batch_map(m, b)
        num = np.sqrt(np.sum((na - nb) ** 2, axis=(1, 2, 3)))
        den = np.sqrt(np.sum((a - b) ** 2, axis=(1, 2, 3)))
        ratios[start : start + n] = num / den
    hist = np.histogram(ratios, bins=bins)
    return LipschitzEstimate(float(ratios.max()), ratios, hist)


def _batch_map(m: ConvNetModule, x: np.ndarray) -> np.ndarray:
    out, cache = forward(m, x)
    if m.role is Role.GM:
        return out
    dout = np.full(out.shape, 1.0 / (out.shape[1] * out.shape[2]))
    dx, _ = backward(m, cache, dout)
    return dx


# Checkpoints

_ROLE_CODES = {Role.GM: 0, Role.DM: 1}


def encode_checkpoint(m: ConvNetModule) -> bytes:
    """Serialise weights into the versioned little-endian ``GDCW`` format."""
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<III", CHECKPOINT_VERSION, _ROLE_CODES[m.role], m.depth),
    ]
    for layer in m.layers:
        parts.append(struct.pack("<IIIII", *layer.weight.shape, int(layer.relu)))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> ConvNetModule:
    """Inverse of :func:`encode_checkpoint`.

    Raises:
        CheckpointError: on a bad magic, version, role or truncated payload.
    """
    if payload[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a GDCW checkpoint")
    try:
        version, role_code, depth = struct.unpack_from("<III", payload, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        role = {v: k for k, v in _ROLE_CODES.items()}[role_code]
        offset = 16
        layers = []
        for _ in range(depth):
            c_out, c_in, kh, kw, relu = struct.unpack_from("<IIIII", payload, offset)
            offset += 20
            count = c_out * c_in * kh * kw
            weight = np.frombuffer(payload, "<f8", count, offset).reshape(c_out, c_in, kh, kw)
            offset += 8 * count
            bias = np.frombuffer(payload, "<f8", c_out, offset)
            offset += 8 * c_out
            layers.append(
                ConvLayer(weight.astype(np.float64), bias.astype(np.float64), bool(relu))
            )
    except (struct.error, ValueError, KeyError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from None
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes in checkpoint")
    return ConvNetModule(layers, role)


def save_checkpoint(path: Union[str, Path], m: ConvNetModule) -> Path:
    """Write a checkpoint atomically."""
    return atomic_write(path, encode_checkpoint(m))


def load_checkpoint(path: Union[str, Path]) -> ConvNetModule:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    return decode_checkpoint(Path(path).read_bytes())
