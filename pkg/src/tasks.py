# Copyright 2025 The gdc-propagation authors.

"""Restoration tasks built on the propagation core.

Each task fixes a fidelity and a prior (deconvolution, blind deblurring, interpolation,
smoothing and rain removal), runs the guarded propagation, certifies the trace and
scores the result against a reference when one is available.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from certify import Certificate, Verdict, certify_descent, certify_fixed_point
from errors import ConfigError, DimensionError, PropagationError
from fidelity import (
    DeconvFidelity,
    Fidelity,
    GradientDomainFidelity,
    IdentityFidelity,
    InterpFidelity,
)
from grid import BlurKernel, ImageGrid, crop, grad_xy, kernel_otf, pad_wrap, psnr, resize, ssim
from neural import DEFAULT_ALPHA_D, ConvNetModule
from propagate import (
    Branch,
    GammaSchedule,
    Objective,
    PropagationTrace,
    StopCriteria,
    TraceKind,
    run,
    run_uncontrolled,
)
from prox import Frame, PriorSpec, prior_value, prox_prior
from synth import Sample

logger = logging.getLogger(__name__)

INIT_CHOICES = ("auto", "observation", "penalized")

_FISTA_ITERS = 2000
_SUPPORT_EPS = 1e-12
_GRADIENT_EXPONENT = 0.8
_HALF_QUADRATIC_STEPS = 9


class Task(Enum):
    """Restoration problems with their prior exponent and default weight."""

    DECONVOLUTION = "deconvolution"
    BLIND_DEBLUR = "blind_deblur"
    INTERPOLATION = "interpolation"
    SMOOTHING = "smoothing"
    RAIN_PDM = "rain_pdm"

    @classmethod
    def parse(cls, value: Union[str, "Task"]) -> "Task":
        """Accept a task or its name.

        Raises:
            ConfigError: for unknown names.
        """
        if isinstance(value, Task):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(t.value for t in cls)
            raise ConfigError(f"unknown task '{value}', expected one of {names}") from None

    @property
    def prior_exponent(self) -> Optional[float]:
        """Exponent of the task's prior, None for the partially defined task."""
        return _PRIOR_EXPONENTS[self]

    @property
    def default_lambda(self) -> float:
        """Prior weight used when the configuration leaves it unset."""
        return _DEFAULT_LAMBDAS[self]

    @property
    def default_init(self) -> str:
        """Warm start used for ``init=auto``."""
        if self in (Task.DECONVOLUTION, Task.BLIND_DEBLUR):
            return "penalized"
        return "observation"


_PRIOR_EXPONENTS = {
    Task.DECONVOLUTION: 1.0,
    Task.BLIND_DEBLUR: 0.8,
    Task.INTERPOLATION: 0.8,
    Task.SMOOTHING: 0.0,
    Task.RAIN_PDM: None,
}

_DEFAULT_LAMBDAS = {
    Task.DECONVOLUTION: 1e-3,
    Task.BLIND_DEBLUR: 2e-3,
    Task.INTERPOLATION: 1e-3,
    Task.SMOOTHING: 1e-2,
    Task.RAIN_PDM: 0.0,
}


class Scheme(Enum):
    """Which modules of the cascade take part: generative, discriminative, corrective."""

    G = "g"
    GD = "gd"
    GC = "gc"
    GDC = "gdc"
    DC = "dc"
    C = "c"

    @classmethod
    def parse(cls, value: Union[str, "Scheme"]) -> "Scheme":
        """Accept a scheme or its lower-case name."""
        if isinstance(value, Scheme):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown scheme '{value}', expected one of {names}") from None

    @property
    def uses_gm(self) -> bool:
        return "g" in self.value

    @property
    def uses_dm(self) -> bool:
        return "d" in self.value

    @property
    def corrects(self) -> bool:
        return "c" in self.value


ABLATION_SCHEMES = (Scheme.G, Scheme.GD, Scheme.GC, Scheme.GDC)


@dataclass
class TaskSpec:
    """Everything needed to run one task on one observation.

    ``kernel`` is the blur operator for deconvolution and, for blind deblurring, an
    optional reference used only to report the kernel error.
    """

    task: Task
    y: ImageGrid
    kernel: Optional[BlurKernel] = None
    mask: Optional[ImageGrid] = None
    ground_truth: Optional[ImageGrid] = None
    lam: Optional[float] = None
    schedule: GammaSchedule = field(default_factory=GammaSchedule)
    stop: StopCriteria = field(default_factory=StopCriteria)
    gm: Optional[ConvNetModule] = None
    dm: Optional[ConvNetModule] = None
    scheme: Scheme = Scheme.GDC
    control: bool = True
    alpha_d: float = DEFAULT_ALPHA_D
    pdm_scale: float = 1.0
    init: str = "auto"
    wavelet_levels: int = 2
    kernel_size: int = 7
    mu: float = 1e-3
    pyramid_levels: int = 3
    pyramid_scale: float = 0.75
    inner_rounds: int = 5
    inner_iters: int = 8
    grad_lambda: float = 0.05
    grad_lambda_decay: float = 0.7
    grad_lambda_min: float = 1e-3
    kernel_prune: float = 0.05
    psnr_cap: Optional[float] = None
    timing: bool = True
    name: str = ""

    def __post_init__(self):
        self.task = Task.parse(self.task)
        self.scheme = Scheme.parse(self.scheme)
        if self.lam is not None and not self.lam >= 0:
            raise ConfigError(f"prior weight must be nonnegative, got {self.lam}")
        if self.init not in INIT_CHOICES:
            raise ConfigError(f"init must be one of {INIT_CHOICES}, got '{self.init}'")
        if self.wavelet_levels < 1:
            raise ConfigError(f"wavelet levels must be positive, got {self.wavelet_levels}")
        if self.task is Task.BLIND_DEBLUR:
            if self.kernel_size < 3 or self.kernel_size % 2 == 0:
                raise ConfigError(
                    f"kernel size must be odd and at least 3, got {self.kernel_size}"
                )
            if not self.mu > 0:
                raise ConfigError(f"mu must be positive, got {self.mu}")
            if self.pyramid_levels < 1:
                raise ConfigError(f"pyramid levels must be positive, got {self.pyramid_levels}")
            if not 0 < self.pyramid_scale < 1:
                raise ConfigError(f"pyramid scale must lie in (0, 1), got {self.pyramid_scale}")
            if self.inner_rounds < 1 or self.inner_iters < 1:
                raise ConfigError("inner rounds and iterations must be positive")

    @classmethod
    def from_config(
        cls,
        cfg: Mapping,
        sample: Sample,
        gm: Optional[ConvNetModule] = None,
        dm: Optional[ConvNetModule] = None,
        task: Optional[Union[str, Task]] = None,
    ) -> "TaskSpec":
        """Build a spec from a run configuration and one loaded sample."""
        return cls(
            task=Task.parse(task or cfg["task"]),
            y=sample.degraded,
            kernel=sample.kernel,
            mask=sample.mask,
            ground_truth=sample.clean,
            lam=cfg["lambda"],
            schedule=GammaSchedule(cfg["gamma0"], cfg["eta"]),
            stop=StopCriteria(cfg["max-iters"], cfg["residual-tol"], cfg["reconstruction-tol"]),
            gm=gm,
            dm=dm,
            scheme=cfg["scheme"],
            control=cfg["control"],
            alpha_d=cfg["alpha-d"],
            pdm_scale=cfg["pdm-scale"],
            init=cfg["init"],
            wavelet_levels=cfg["wavelet-levels"],
            kernel_size=cfg["kernel-size"],
            mu=cfg["mu"],
            pyramid_levels=cfg["pyramid-levels"],
            pyramid_scale=cfg["pyramid-scale"],
            inner_rounds=cfg["inner-rounds"],
            inner_iters=cfg["inner-iters"],
            grad_lambda=cfg["grad-lambda"],
            grad_lambda_decay=cfg["grad-lambda-decay"],
            grad_lambda_min=cfg["grad-lambda-min"],
            kernel_prune=cfg["kernel-prune"],
            psnr_cap=cfg["psnr-cap"],
            timing=cfg["record-timing"],
            name=sample.name,
        )

    @property
    def weight(self) -> float:
        return self.task.default_lambda if self.lam is None else float(self.lam)

    @property
    def prior(self) -> Optional[PriorSpec]:
        """The task's image-domain prior, None for rain removal."""
        p = self.task.prior_exponent
        if p is None:
            return None
        return PriorSpec(p, self.weight, Frame.WAVELET, self.wavelet_levels)

    def modules(self) -> tuple[Optional[ConvNetModule], Optional[ConvNetModule]]:
        """The modules the scheme keeps."""
        return (self.gm if self.scheme.uses_gm else None, self.dm if self.scheme.uses_dm else None)


@dataclass
class TaskResult:
    """Output of one task run."""

    name: str
    task: Task
    u_final: ImageGrid
    traces: list[PropagationTrace]
    certificates: list[Certificate]
    metrics: dict[str, float]
    kernel: Optional[BlurKernel] = None

    @property
    def certified(self) -> bool:
        """No certificate failed."""
        return all(c.verdict is not Verdict.FAIL for c in self.certificates)

    def summary(self) -> str:
        """``key=value`` lines of the metrics."""
        lines = [f"name={self.name}", f"task={self.task.value}"]
        lines += [f"{key}={value!r}" for key, value in sorted(self.metrics.items())]
        lines.append(f"certified={str(self.certified).lower()}")
        return "\n".join(lines) + "\n"


@dataclass
class KernelEstimate:
    """Kernel returned by :func:`solve_kernel` with its objective value.

    ``degenerate`` is set when the gradients carried no information and the uniform
    kernel was returned.
    """

    kernel: BlurKernel
    objective: float
    degenerate: bool = False


def _initial(spec: TaskSpec, fidelity: Fidelity, y: ImageGrid) -> ImageGrid:
    init = spec.task.default_init if spec.init == "auto" else spec.init
    if init == "penalized":
        return fidelity.penalized_solve(y, spec.schedule.gamma0)
    return y


def _propagate(
    spec: TaskSpec, obj: Objective, u0: ImageGrid, stop: Optional[StopCriteria] = None
) -> tuple[ImageGrid, PropagationTrace, list[Certificate]]:
    gm, dm = spec.modules()
    stop = stop or spec.stop
    if spec.control and spec.scheme.corrects:
        u, trace = run(obj, u0, gm, dm, stop, spec.alpha_d, spec.pdm_scale, spec.timing)
        if trace.kind is TraceKind.FDM:
            return u, trace, [certify_descent(trace)]
        return u, trace, [certify_fixed_point(trace, scale=spec.pdm_scale)]
    if spec.control:
        logger.info("Scheme %s has no corrective module, running unguarded", spec.scheme.value)
    u, trace = run_uncontrolled(
        obj, u0, gm, dm, stop, spec.alpha_d, correct=spec.scheme.corrects, timing=spec.timing
    )
    return u, trace, []


def _fidelity(spec: TaskSpec, y: ImageGrid) -> Fidelity:
    match spec.task:
        case Task.DECONVOLUTION:
            if spec.kernel is None:
                raise ConfigError("deconvolution needs a blur kernel")
            return DeconvFidelity(y, spec.kernel)
        case Task.INTERPOLATION:
            if spec.mask is None:
                raise ConfigError("interpolation needs a mask")
            if spec.mask.shape[:2] != spec.y.shape[:2]:
                raise DimensionError(
                    f"mask {spec.mask.shape} does not match image {spec.y.shape}"
                )
            return InterpFidelity(y, pad_wrap(spec.mask, 2**spec.wavelet_levels))
        case _:
            return IdentityFidelity(y)


def _accept_rate(traces: Sequence[PropagationTrace]) -> float:
    records = [r for trace in traces for r in trace.records]
    if not records:
        return 0.0
    return sum(r.branch is not Branch.REJECTED for r in records) / len(records)


def _metrics(spec: TaskSpec, u: ImageGrid, traces: Sequence[PropagationTrace]) -> dict[str, float]:
    metrics = {
        "iterations": float(sum(len(t) for t in traces)),
        "accept_rate": _accept_rate(traces),
    }
    gt = spec.ground_truth
    if gt is not None:
        metrics["psnr"] = psnr(u, gt, spec.psnr_cap)
        metrics["psnr_input"] = psnr(spec.y, gt, spec.psnr_cap)
        if min(gt.height, gt.width) >= 8:
            metrics["ssim"] = ssim(u.clip(), gt)
    return metrics


def run_task(spec: TaskSpec) -> TaskResult:
    """Run one task end to end.

    The observation is extended periodically to a multiple of the wavelet block size and
    the result is cropped back.

    Raises:
        ConfigError: when the kernel or mask the task needs is missing.
        DimensionError: when operands do not fit the image.
        PropagationError: when a stage produces non-finite values, named after the spec.
    """
    try:
        if spec.task is Task.BLIND_DEBLUR:
            return run_blind_deblur(spec)
        return _run_direct(spec)
    except PropagationError as e:
        e.name = e.name or spec.name
        raise


def _run_direct(spec: TaskSpec) -> TaskResult:
    y = pad_wrap(spec.y, 2**spec.wavelet_levels)
    fidelity = _fidelity(spec, y)
    obj = Objective(fidelity, spec.prior, spec.schedule)
    u, trace, certificates = _propagate(spec, obj, _initial(spec, fidelity, y))
    u_final = crop(u, spec.y.height, spec.y.width)
    metrics = _metrics(spec, u_final, [trace])
    logger.info("Task %s on '%s' finished: %s", spec.task.value, spec.name, metrics)
    return TaskResult(spec.name, spec.task, u_final, [trace], certificates, metrics)


def resolve_workers(requested: int = 0) -> int:
    """Worker count: the request, else ``GDC_THREADS``, else the CPU count."""
    if requested > 0:
        return requested
    env = os.environ.get("GDC_THREADS", "").strip()
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"GDC_THREADS must be an integer, got '{env}'") from None
        if value > 0:
            return value
    return os.cpu_count() or 1


def run_many(specs: Sequence[TaskSpec], workers: int = 1) -> list[TaskResult]:
    """Run independent tasks, concurrently when ``workers > 1``; results keep input order."""
    if workers <= 1 or len(specs) <= 1:
        return [run_task(spec) for spec in specs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_task, specs))


def task_for(sample: Sample) -> Task:
    """Deconvolution when the sample has a kernel, interpolation with a mask, else smoothing."""
    if sample.kernel is not None:
        return Task.DECONVOLUTION
    if sample.mask is not None:
        return Task.INTERPOLATION
    return Task.SMOOTHING


def run_ablation(
    samples: Sequence[Sample],
    gm: Optional[ConvNetModule],
    dm: Optional[ConvNetModule],
    schemes: Sequence[Scheme] = ABLATION_SCHEMES,
    workers: int = 1,
    **options,
) -> dict[Scheme, float]:
    """Mean PSNR of every scheme over the samples.

    ``options`` are passed to :class:`TaskSpec`.

    Raises:
        ConfigError: if a sample has no clean reference.
    """
    if any(s.clean is None for s in samples):
        raise ConfigError("ablation needs ground truth for every sample")
    means = {}
    for scheme in schemes:
        specs = [
            TaskSpec(
                task_for(s),
                s.degraded,
                kernel=s.kernel,
                mask=s.mask,
                ground_truth=s.clean,
                gm=gm,
                dm=dm,
                scheme=scheme,
                name=s.name,
                **options,
            )
            for s in samples
        ]
        results = run_many(specs, workers)
        means[scheme] = float(np.mean([r.metrics["psnr"] for r in results]))
        logger.info("Scheme %s: mean PSNR %.3f dB", scheme.value, means[scheme])
    return means


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{k : k >= 0, sum(k) = 1}``, keeping the input shape."""
    flat = np.asarray(v, dtype=np.float64).ravel()
    ordered = np.sort(flat)[::-1]
    cumulative = np.cumsum(ordered) - 1.0
    index = np.arange(1, flat.size + 1)
    positive = ordered - cumulative / index > 0
    rho = index[positive][-1]
    theta = cumulative[positive][-1] / rho
    return np.maximum(flat - theta, 0.0).reshape(np.shape(v))


def _as_array(field_: Union[ImageGrid, Sequence[ImageGrid]]) -> np.ndarray:
    if isinstance(field_, ImageGrid):
        return field_.data
    return ImageGrid.stack(field_).data


def kernel_objective(
    weights: np.ndarray,
    u_grad: Union[ImageGrid, Sequence[ImageGrid]],
    y_grad: Union[ImageGrid, Sequence[ImageGrid]],
    mu: float,
) -> float:
    """``0.5 * ||u (*) k - y||**2 + mu * ||k||**2`` summed over the gradient channels."""
    u, y = _as_array(u_grad), _as_array(y_grad)
    otf = kernel_otf(np.asarray(weights, dtype=np.float64), u.shape[0], u.shape[1])
    blurred = sfft.ifft2(sfft.fft2(u, axes=(0, 1)) * otf[:, :, np.newaxis], axes=(0, 1)).real
    return 0.5 * float(np.sum((blurred - y) ** 2)) + mu * float(np.sum(np.square(weights)))


def _support_offsets(size: int) -> tuple[np.ndarray, np.ndarray]:
    r = size // 2
    oy, ox = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return oy.ravel(), ox.ravel()


def _normal_equations(
    u_hat: np.ndarray, y_hat: np.ndarray, mu: float, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Hessian and linear term of the kernel objective restricted to the support."""
    h, w = u_hat.shape[:2]
    auto = sfft.ifft2(np.sum(np.abs(u_hat) ** 2, axis=2)).real
    cross = sfft.ifft2(np.sum(np.conj(u_hat) * y_hat, axis=2)).real
    oy, ox = _support_offsets(size)
    hessian = auto[(oy[:, None] - oy[None, :]) % h, (ox[:, None] - ox[None, :]) % w]
    hessian = hessian + 2.0 * mu * np.eye(oy.size)
    return hessian, cross[oy % h, ox % w]


def _quadratic(k: np.ndarray, hessian: np.ndarray, linear: np.ndarray) -> float:
    return 0.5 * float(k @ hessian @ k) - float(linear @ k)


def _simplex_qp(start: np.ndarray, hessian: np.ndarray, linear: np.ndarray) -> np.ndarray:
    """Accelerated projected gradient with restarts, then an exact solve on the support."""
    step = 1.0 / float(np.linalg.eigvalsh(hessian)[-1])
    k = x = project_simplex(start)
    t = 1.0
    value = _quadratic(k, hessian, linear)
    for _ in range(_FISTA_ITERS):
        k_next = project_simplex(x - step * (hessian @ x - linear))
        next_value = _quadratic(k_next, hessian, linear)
        if next_value > value:
            x, t = k, 1.0
            continue
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        x = k_next + ((t - 1.0) / t_next) * (k_next - k)
        moved = float(np.linalg.norm(k_next - k))
        k, t, value = k_next, t_next, next_value
        if moved <= 1e-14:
            break

    support = np.flatnonzero(k > _SUPPORT_EPS)
    n = support.size
    system = np.zeros((n + 1, n + 1))
    system[:n, :n] = hessian[np.ix_(support, support)]
    system[:n, n] = system[n, :n] = 1.0
    rhs = np.append(linear[support], 1.0)
    try:
        solution = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        return k
    if np.all(solution[:n] >= 0):
        polished = np.zeros_like(k)
        polished[support] = solution[:n]
        if _quadratic(polished, hessian, linear) <= value:
            return polished
    return k


def solve_kernel(
    u_grad: Union[ImageGrid, Sequence[ImageGrid]],
    y_grad: Union[ImageGrid, Sequence[ImageGrid]],
    mu: float,
    size: int,
) -> KernelEstimate:
    """Estimate a blur kernel on the simplex from sharp and blurred gradient fields.

    The unconstrained ridge solution is computed in the Fourier domain and cropped to
    the kernel support; clipped and renormalised, it starts a projected solve of the
    constrained problem over the support.

    Args:
        u_grad: sharp gradients, a stacked grid or a sequence of grids.
        y_grad: blurred gradients with the same layout.
        mu: ridge weight, positive.
        size: odd kernel side.

    Raises:
        ConfigError: for an even size or a non-positive ``mu``.
        DimensionError: when the fields differ in shape or the kernel does not fit.
    """
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {size}")
    if not mu > 0:
        raise ConfigError(f"mu must be positive, got {mu}")
    u, y = _as_array(u_grad), _as_array(y_grad)
    if u.shape != y.shape:
        raise DimensionError(f"gradient fields differ in shape: {u.shape} vs {y.shape}")
    h, w = u.shape[:2]
    if size > h or size > w:
        raise DimensionError(f"kernel size {size} does not fit a {h}x{w} field")

    def fallback() -> KernelEstimate:
        logger.warning("kernel estimate is degenerate, using a uniform %dx%d kernel", size, size)
        k = BlurKernel.uniform(size)
        return KernelEstimate(k, kernel_objective(k.weights, u_grad, y_grad, mu), True)

    if not np.any(u):
        return fallback()
    u_hat = sfft.fft2(u, axes=(0, 1))
    y_hat = sfft.fft2(y, axes=(0, 1))
    ridge_hat = np.sum(np.conj(u_hat) * y_hat, axis=2) / (
        np.sum(np.abs(u_hat) ** 2, axis=2) + 2.0 * mu
    )
    full = sfft.ifft2(ridge_hat).real
    oy, ox = _support_offsets(size)
    ridge = full[oy % h, ox % w]
    if not np.any(ridge > 0):
        return fallback()
    start = np.clip(ridge, 0.0, None)
    start /= start.sum()
    hessian, linear = _normal_equations(u_hat, y_hat, mu, size)
    k = _simplex_qp(start, hessian, linear)
    kernel = BlurKernel.normalized(k.reshape(size, size))
    return KernelEstimate(kernel, kernel_objective(kernel.weights, u_grad, y_grad, mu))


def kernel_distance(a: BlurKernel, b: BlurKernel) -> float:
    """l2 distance of two kernels after zero-padding both to a common centred size."""
    kh = max(a.size[0], b.size[0])
    kw = max(a.size[1], b.size[1])

    def embed(k: BlurKernel) -> np.ndarray:
        out = np.zeros((kh, kw))
        top, left = (kh - k.size[0]) // 2, (kw - k.size[1]) // 2
        out[top : top + k.size[0], left : left + k.size[1]] = k.weights
        return out

    return float(np.linalg.norm(embed(a) - embed(b)))


def _two_tap(size: int) -> BlurKernel:
    w = np.zeros((size, size))
    c = size // 2
    w[c, c] = w[c, c + 1] = 0.5
    return BlurKernel(w)


def _rescale_kernel(k: BlurKernel, factor: float, size: int) -> BlurKernel:
    """Stretch ``k`` about its centre by ``factor`` and resample it on a ``size`` support."""
    if factor == 1.0 and k.size == (size, size):
        return k
    r = size // 2
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1] / factor
    coords = np.stack([oy + k.size[0] // 2, ox + k.size[1] // 2])
    sampled = ndimage.map_coordinates(k.weights, coords, order=1, mode="constant", cval=0.0)
    return BlurKernel.normalized(sampled)


def _refine_kernel(k: BlurKernel, prune: float) -> BlurKernel:
    """Drop weak weights and move the centre of mass to the kernel centre."""
    w = np.array(k.weights)
    w[w < prune * w.max()] = 0.0
    w /= w.sum()
    rows, cols = np.indices(w.shape)
    dy = int(round(w.shape[0] // 2 - float(np.sum(rows * w))))
    dx = int(round(w.shape[1] // 2 - float(np.sum(cols * w))))
    if dy or dx:
        w = ndimage.shift(w, (dy, dx), order=0, mode="constant", cval=0.0)
    return BlurKernel.normalized(w)


def sparse_gradients(fidelity: GradientDomainFidelity, lam: float) -> ImageGrid:
    """Half-quadratic estimate of the sharp gradients under the current kernel.

    Alternates the penalized solve with the l0.8 shrinkage while the coupling weight
    doubles from ``lam`` to ``256 * lam``. Only salient edges survive the shrinkage.
    """
    prior = PriorSpec(_GRADIENT_EXPONENT, lam, Frame.GRADIENT)
    z = ImageGrid(np.zeros(fidelity.y.shape))
    for step in range(_HALF_QUADRATIC_STEPS):
        beta = lam * 2.0**step
        z = prox_prior(fidelity.penalized_solve(z, beta), prior, beta)
    return z


def latent_energy(y_grad: ImageGrid, kernel: BlurKernel, lam: float, mu: float) -> float:
    """Joint blind objective of ``kernel`` with its own sparse gradient estimate."""
    fidelity = GradientDomainFidelity(y_grad, kernel)
    g = sparse_gradients(fidelity, lam)
    prior = PriorSpec(_GRADIENT_EXPONENT, lam, Frame.GRADIENT)
    return fidelity.evaluate(g) + prior_value(g, prior) + mu * float(np.sum(kernel.weights**2))


def _odd(value: float) -> int:
    n = max(3, int(round(value)))
    return n if n % 2 else n + 1


def run_blind_deblur(spec: TaskSpec) -> TaskResult:
    """Estimate the kernel coarse to fine, then deconvolve at full resolution.

    Every pyramid level alternates propagation on the gradient-domain objective with the
    kernel solve. The kernel is stretched by ``1 / pyramid_scale`` between levels. At full
    resolution the estimate is kept only if it lowers the joint blind objective below the
    identity kernel's. Colour images estimate the kernel on their channel mean.

    Raises:
        ConfigError: when the kernel does not fit the coarsest level.
    """
    y = spec.y
    gray = y if y.channels == 1 else ImageGrid(y.data.mean(axis=2))
    shapes = []
    sizes = []
    for level in range(spec.pyramid_levels):
        s = spec.pyramid_scale**level
        shapes.append((max(1, round(gray.height * s)), max(1, round(gray.width * s))))
        sizes.append(min(_odd(spec.kernel_size * s), spec.kernel_size))
    if sizes[-1] > min(shapes[-1]):
        raise ConfigError(
            f"kernel size {sizes[-1]} exceeds the coarsest pyramid level {shapes[-1]}"
        )

    kernel = _two_tap(sizes[-1])
    traces: list[PropagationTrace] = []
    certificates: list[Certificate] = []
    inner_stop = replace(spec.stop, max_iters=spec.inner_iters)
    rounds = 0
    full_grad = ImageGrid.stack(grad_xy(gray))
    for level in reversed(range(spec.pyramid_levels)):
        h, w = shapes[level]
        y_grad = full_grad if level == 0 else ImageGrid.stack(grad_xy(resize(gray, h, w)))
        if level < spec.pyramid_levels - 1:
            kernel = _rescale_kernel(kernel, 1.0 / spec.pyramid_scale, sizes[level])
        for _ in range(spec.inner_rounds):
            lam = max(spec.grad_lambda * spec.grad_lambda_decay**rounds, spec.grad_lambda_min)
            rounds += 1
            fidelity = GradientDomainFidelity(y_grad, kernel)
            prior = PriorSpec(_GRADIENT_EXPONENT, lam, Frame.GRADIENT)
            obj = Objective(fidelity, prior, spec.schedule)
            u0 = sparse_gradients(fidelity, lam)
            u_grad, trace, certs = _propagate(spec, obj, u0, inner_stop)
            traces.append(trace)
            certificates += certs
            estimate = solve_kernel(u_grad, y_grad, spec.mu, sizes[level])
            kernel = _refine_kernel(estimate.kernel, spec.kernel_prune)
        logger.info("Pyramid level %d (%dx%d) done, kernel %s", level, h, w, kernel.size)

    delta = BlurKernel.delta(kernel.size[0])
    estimated = latent_energy(full_grad, kernel, spec.grad_lambda, spec.mu)
    identity = latent_energy(full_grad, delta, spec.grad_lambda, spec.mu)
    if identity <= estimated:
        logger.info(
            "Identity kernel explains '%s' as well as the estimate (%.6g <= %.6g), keeping it",
            spec.name,
            identity,
            estimated,
        )
        kernel = delta

    padded = pad_wrap(y, 2**spec.wavelet_levels)
    fidelity = DeconvFidelity(padded, kernel)
    obj = Objective(fidelity, spec.prior, spec.schedule)
    u, trace, certs = _propagate(spec, obj, _initial(spec, fidelity, padded))
    traces.append(trace)
    certificates += certs
    u_final = crop(u, y.height, y.width)
    metrics = _metrics(spec, u_final, traces)
    if spec.kernel is not None:
        metrics["kernel_error"] = kernel_distance(kernel, spec.kernel)
    logger.info("Blind deblurring of '%s' finished: %s", spec.name, metrics)
    return TaskResult(spec.name, spec.task, u_final, traces, certificates, metrics, kernel)
