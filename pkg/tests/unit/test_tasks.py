# Copyright 2025 The gdc-propagation authors.

import itertools

import numpy as np
import pytest

from config import RunConfig
from errors import ConfigError, DimensionError, PropagationError
from fidelity import GradientDomainFidelity, IdentityFidelity
from grid import (
    BlurKernel,
    ImageGrid,
    conv2d_circular,
    gaussian_kernel,
    grad_xy,
    motion_kernel,
)
from neural import make_gm
from propagate import GammaSchedule, Objective, StopCriteria, run
from prox import Frame, PriorSpec
from synth import Sample
from tasks import (
    Scheme,
    Task,
    TaskResult,
    TaskSpec,
    kernel_distance,
    _rescale_kernel,
    kernel_objective,
    latent_energy,
    project_simplex,
    resolve_workers,
    run_many,
    run_task,
    solve_kernel,
    sparse_gradients,
    task_for,
)


def random_grid(shape, seed=0):
    return ImageGrid(np.random.default_rng(seed).random(shape))


def gradients(u: ImageGrid) -> ImageGrid:
    return ImageGrid.stack(grad_xy(u))


def test_task_and_scheme_parsing():
    """Test names, defaults and unknown values of tasks and schemes."""
    assert Task.parse(" Deconvolution ") is Task.DECONVOLUTION
    assert Task.RAIN_PDM.prior_exponent is None
    assert Task.SMOOTHING.prior_exponent == 0.0
    assert Task.DECONVOLUTION.default_init == "penalized"
    assert Task.INTERPOLATION.default_init == "observation"
    assert Scheme.parse("GDC") is Scheme.GDC
    assert Scheme.GC.uses_gm and not Scheme.GC.uses_dm and Scheme.GC.corrects
    assert not Scheme.GD.corrects
    with pytest.raises(ConfigError):
        Task.parse("denoise")
    with pytest.raises(ConfigError):
        Scheme.parse("x")


def test_task_spec_validation():
    """Test that invalid spec fields raise."""
    y = ImageGrid.zeros(8, 8)
    with pytest.raises(ConfigError):
        TaskSpec(Task.SMOOTHING, y, lam=-1.0)
    with pytest.raises(ConfigError):
        TaskSpec(Task.SMOOTHING, y, init="zeros")
    with pytest.raises(ConfigError):
        TaskSpec(Task.BLIND_DEBLUR, y, kernel_size=4)
    with pytest.raises(ConfigError):
        TaskSpec(Task.BLIND_DEBLUR, y, pyramid_scale=1.0)
    spec = TaskSpec("rain_pdm", y)
    assert spec.task is Task.RAIN_PDM and spec.prior is None


def test_spec_from_config_uses_sample_operators():
    """Test that a spec built from configuration carries the sample and options."""
    k = gaussian_kernel(3, 0.8)
    sample = Sample("a", random_grid((8, 8)), random_grid((8, 8), 1), kernel=k)
    cfg = RunConfig.from_text("task=deconvolution\nmax-iters=3\nscheme=gc\n")
    spec = TaskSpec.from_config(cfg, sample)
    assert spec.task is Task.DECONVOLUTION
    assert spec.kernel is k
    assert spec.stop.max_iters == 3
    assert spec.scheme is Scheme.GC
    assert spec.name == "a"
    assert spec.weight == Task.DECONVOLUTION.default_lambda


def test_smoothing_without_prior_returns_the_input():
    """Test that smoothing with a zero prior weight leaves the observation unchanged."""
    y = random_grid((8, 8), 2)
    result = run_task(TaskSpec(Task.SMOOTHING, y, lam=0.0, stop=StopCriteria(5)))
    assert np.allclose(result.u_final.data, y.data, atol=1e-12)
    assert result.certified


def test_full_mask_interpolation_matches_identity_fidelity():
    """Test that an all-ones mask behaves like the identity fidelity."""
    y = random_grid((8, 8), 3)
    stop = StopCriteria(10)
    spec = TaskSpec(
        Task.INTERPOLATION, y, mask=ImageGrid.full(8, 8, 1.0), lam=1e-3, stop=stop, timing=False
    )
    result = run_task(spec)
    obj = Objective(IdentityFidelity(y), PriorSpec(0.8, 1e-3, Frame.WAVELET, 2), GammaSchedule())
    expected, _ = run(obj, y, stop=stop, timing=False)
    assert np.allclose(result.u_final.data, expected.data, atol=1e-8)


def test_missing_operators_raise():
    """Test that deconvolution needs a kernel and interpolation a fitting mask."""
    y = ImageGrid.zeros(8, 8)
    with pytest.raises(ConfigError):
        run_task(TaskSpec(Task.DECONVOLUTION, y))
    with pytest.raises(ConfigError):
        run_task(TaskSpec(Task.INTERPOLATION, y))
    with pytest.raises(DimensionError):
        run_task(TaskSpec(Task.INTERPOLATION, y, mask=ImageGrid.full(4, 8, 1.0)))


def test_odd_sizes_are_padded_and_cropped():
    """Test that an image not divisible by the wavelet block comes back in its own size."""
    k = gaussian_kernel(3, 0.8)
    clean = random_grid((10, 9), 4)
    spec = TaskSpec(
        Task.DECONVOLUTION,
        conv2d_circular(clean, k),
        kernel=k,
        ground_truth=clean,
        stop=StopCriteria(3),
        name="odd",
    )
    result = run_task(spec)
    assert result.u_final.shape == (10, 9, 1)
    assert result.metrics["iterations"] == 3.0
    assert {"psnr", "psnr_input", "ssim", "accept_rate"} <= set(result.metrics)
    assert "name=odd" in result.summary()
    assert result.summary().rstrip().endswith("certified=true")


def test_result_certified_ignores_not_applicable():
    """Test that only failed certificates clear the certified flag."""
    result = TaskResult("a", Task.SMOOTHING, ImageGrid.zeros(2, 2), [], [], {})
    assert result.certified


def test_task_for_sample():
    """Test the task chosen for samples with a kernel, a mask or neither."""
    u = ImageGrid.zeros(4, 4)
    assert task_for(Sample("a", u, kernel=BlurKernel.delta(3))) is Task.DECONVOLUTION
    assert task_for(Sample("b", u, mask=ImageGrid.full(4, 4, 1.0))) is Task.INTERPOLATION
    assert task_for(Sample("c", u)) is Task.SMOOTHING


def test_run_many_keeps_input_order():
    """Test that concurrent runs return results in input order."""
    specs = [
        TaskSpec(Task.SMOOTHING, random_grid((8, 8), s), stop=StopCriteria(2), name=f"s{s}")
        for s in range(4)
    ]
    assert [r.name for r in run_many(specs, workers=3)] == ["s0", "s1", "s2", "s3"]


def test_resolve_workers(monkeypatch):
    """Test the worker count from the request, the environment and the CPU count."""
    monkeypatch.setenv("GDC_THREADS", "3")
    assert resolve_workers(2) == 2
    assert resolve_workers(0) == 3
    monkeypatch.setenv("GDC_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_workers(0)
    monkeypatch.delenv("GDC_THREADS")
    assert resolve_workers(0) >= 1


def test_project_simplex():
    """Test that the projection lands on the simplex and is the nearest point there."""
    rng = np.random.default_rng(5)
    assert project_simplex(np.array([2.0, 0.0])).tolist() == [1.0, 0.0]
    assert np.allclose(project_simplex(np.array([0.2, 0.3, 0.5])), [0.2, 0.3, 0.5])
    for _ in range(20):
        v = rng.normal(size=(3, 3))
        p = project_simplex(v)
        assert p.shape == (3, 3)
        assert p.min() >= 0 and p.sum() == pytest.approx(1.0)
        q = rng.dirichlet(np.ones(9)).reshape(3, 3)
        assert np.linalg.norm(v - p) <= np.linalg.norm(v - q) + 1e-12


def test_kernel_distance_centres_kernels():
    """Test the distance between kernels of equal and different sizes."""
    assert kernel_distance(BlurKernel.delta(3), BlurKernel.delta(5)) == 0.0
    w = np.zeros((3, 3))
    w[1, 1] = w[1, 2] = 0.5
    assert kernel_distance(BlurKernel(w), BlurKernel.delta(3)) == pytest.approx(np.sqrt(0.5))


def test_solve_kernel_recovers_a_known_blur():
    """Test recovery of a 3x3 kernel from exact gradient data."""
    u = random_grid((32, 32), 6)
    w = np.array([[0.0, 0.1, 0.0], [0.1, 0.5, 0.2], [0.0, 0.1, 0.0]])
    k = BlurKernel(w)
    estimate = solve_kernel(gradients(u), gradients(conv2d_circular(u, k)), 1e-4, 3)
    assert not estimate.degenerate
    assert kernel_distance(estimate.kernel, k) < 0.05


def test_solve_kernel_finds_delta_for_unblurred_data():
    """Test that identical sharp and blurred gradients give a centred spike."""
    g = gradients(random_grid((24, 24), 7))
    estimate = solve_kernel(g, g, 1e-3, 5)
    assert estimate.kernel.weights[2, 2] > 0.9


def simplex_qp_oracle(u: np.ndarray, y: np.ndarray, mu: float, size: int) -> float:
    """Minimum of the kernel objective over the simplex by enumerating supports."""
    r = size // 2
    offsets = [(i - r, j - r) for i in range(size) for j in range(size)]
    design = np.stack([np.roll(u, off, axis=(0, 1)).ravel() for off in offsets], axis=1)
    hessian = design.T @ design + 2 * mu * np.eye(len(offsets))
    linear = design.T @ y.ravel()
    best = np.inf
    n = len(offsets)
    for count in range(1, n + 1):
        for support in itertools.combinations(range(n), count):
            idx = list(support)
            system = np.zeros((count + 1, count + 1))
            system[:count, :count] = hessian[np.ix_(idx, idx)]
            system[:count, count] = system[count, :count] = 1.0
            solution = np.linalg.solve(system, np.append(linear[idx], 1.0))[:count]
            if np.all(solution >= -1e-12):
                k = np.zeros(n)
                k[idx] = solution
                value = 0.5 * float(np.sum((design @ k - y.ravel()) ** 2)) + mu * float(k @ k)
                best = min(best, value)
    return best


def test_solve_kernel_matches_exhaustive_oracle():
    """Test the constrained kernel solve against enumeration of all supports."""
    rng = np.random.default_rng(8)
    for seed in range(5):
        u = random_grid((12, 12), 20 + seed)
        w = rng.random((3, 3))
        k = BlurKernel(w / w.sum())
        u_grad = gradients(u)
        noise = ImageGrid(0.05 * rng.standard_normal((12, 12, 2)))
        y_grad = gradients(conv2d_circular(u, k)) + noise
        estimate = solve_kernel(u_grad, y_grad, 1e-3, 3)
        oracle = simplex_qp_oracle(u_grad.data, y_grad.data, 1e-3, 3)
        assert estimate.objective <= oracle + 1e-6
        assert estimate.objective == pytest.approx(
            kernel_objective(estimate.kernel.weights, u_grad, y_grad, 1e-3)
        )


def test_solve_kernel_degenerate_input_gives_uniform(caplog):
    """Test that zero sharp gradients fall back to the uniform kernel with a warning."""
    zero = ImageGrid.zeros(8, 8, 2)
    estimate = solve_kernel(zero, random_grid((8, 8, 2)), 1e-3, 3)
    assert estimate.degenerate
    assert np.allclose(estimate.kernel.weights, 1.0 / 9.0)
    assert "degenerate" in caplog.text


def test_solve_kernel_argument_checks():
    """Test size, weight and shape validation of the kernel solve."""
    g = random_grid((8, 8, 2))
    with pytest.raises(ConfigError):
        solve_kernel(g, g, 1e-3, 4)
    with pytest.raises(ConfigError):
        solve_kernel(g, g, 0.0, 3)
    with pytest.raises(DimensionError):
        solve_kernel(g, random_grid((8, 6, 2)), 1e-3, 3)
    with pytest.raises(DimensionError):
        solve_kernel(g, g, 1e-3, 9)


def square(size: int = 32) -> ImageGrid:
    u = np.zeros((size, size))
    u[8:24, 10:22] = 1.0
    return ImageGrid(u)


def test_rescale_kernel_stretches_about_the_centre():
    """Test that a horizontal line kernel doubles in length and stays on the middle row."""
    w = np.zeros((3, 3))
    w[1, :] = 1.0 / 3.0
    k = BlurKernel(w)
    stretched = _rescale_kernel(k, 2.0, 5)
    assert np.allclose(stretched.weights[2], 0.2)
    assert np.allclose(np.delete(stretched.weights, 2, axis=0), 0.0)
    assert _rescale_kernel(k, 1.0, 3) is k


def test_sparse_gradients_keep_edges_and_drop_small_values():
    """Test that the half-quadratic estimate keeps the square's edges and zeroes weak noise."""
    g = gradients(square())
    noise = ImageGrid(0.002 * np.random.default_rng(9).standard_normal(g.shape))
    estimate = sparse_gradients(GradientDomainFidelity(g + noise, BlurKernel.delta(3)), 0.05)
    edges = np.abs(g.data) > 0.5
    assert np.all(np.abs(estimate.data[edges]) > 0.8)
    assert np.count_nonzero(estimate.data[~edges]) == 0


def test_latent_energy_prefers_the_identity_for_sharp_data():
    """Test that sharp gradients are explained better without blur than with a motion kernel."""
    y_grad = gradients(square())
    identity = latent_energy(y_grad, BlurKernel.delta(7), 0.05, 1e-3)
    blurred = latent_energy(y_grad, motion_kernel(7, np.pi / 6), 0.05, 1e-3)
    assert identity < blurred


def test_latent_energy_prefers_the_true_blur():
    """Test that motion-blurred gradients are explained better by their kernel than by none."""
    k = motion_kernel(7, np.pi / 6)
    y_grad = gradients(conv2d_circular(square(), k))
    assert latent_energy(y_grad, k, 0.05, 1e-3) < latent_energy(
        y_grad, BlurKernel.delta(7), 0.05, 1e-3
    )


def test_run_task_names_propagation_errors():
    """Test that a failing stage reports the name of the task it broke."""
    gm = make_gm(width=4, depth=3, seed=4)
    for layer in gm.layers:
        layer.weight *= 1e120
    spec = TaskSpec(Task.SMOOTHING, random_grid((8, 8)), gm=gm, name="broken", timing=False)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(PropagationError) as excinfo:
            run_task(spec)
    assert excinfo.value.name == "broken"
