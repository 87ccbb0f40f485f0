# Copyright 2025 The gdc-propagation authors.

import logging

import numpy as np
import pytest

from certify import Verdict, certify_contraction, certify_descent
from fidelity import DeconvFidelity
from grid import BlurKernel, conv2d_circular, gaussian_kernel
from neural import (
    DEFAULT_ALPHA_D,
    ConvNetModule,
    Role,
    an_normalize,
    estimate_lipschitz,
    zero_module,
)
from propagate import (
    GammaSchedule,
    Objective,
    StopCriteria,
    TraceKind,
    run,
    run_uncontrolled,
)
from prox import Frame, PriorSpec
from tasks import Task, TaskSpec, run_task
from tests.integration.helpers import Suite, adversarial_gm, samples

logger = logging.getLogger(__name__)


@pytest.mark.parametrize("modules", ["zero", "trained", "adversarial"])
def test_descent_holds_for_any_modules(modules: str, gm: ConvNetModule, dm: ConvNetModule):
    """Check that guarded deconvolution certifies whatever the modules do.

    Zero, trained and deliberately harmful modules all yield a monotone objective.
    """
    sample = samples(Suite.BLUR)[0]
    match modules:
        case "zero":
            pair = (zero_module(Role.GM, width=8), zero_module(Role.DM, width=8))
        case "trained":
            pair = (gm, dm)
        case _:
            pair = (adversarial_gm(), None)
    spec = TaskSpec(
        Task.DECONVOLUTION,
        sample.degraded,
        kernel=sample.kernel,
        ground_truth=sample.clean,
        gm=pair[0],
        dm=pair[1],
        stop=StopCriteria(50),
        timing=False,
    )
    result = run_task(spec)
    assert result.certified
    psi = result.traces[0].objectives()
    assert all(b <= a + 1e-8 * (1 + abs(a)) for a, b in zip(psi, psi[1:]))
    if modules == "adversarial":
        assert result.metrics["accept_rate"] < 1.0
    logger.info("%s modules: accept rate %.2f", modules, result.metrics["accept_rate"])


def test_rain_removal_respects_the_residual_bound(gm: ConvNetModule, dm: ConvNetModule):
    """Check that accepted rain-removal steps stay within the bound and the residuals decay."""
    sample = samples(Suite.RAIN)[0]
    spec = TaskSpec(
        Task.RAIN_PDM,
        sample.degraded,
        gm=gm,
        dm=dm,
        schedule=GammaSchedule(1.0, 1.5),
        stop=StopCriteria(40),
    )
    result = run_task(spec)
    trace = result.traces[0]
    assert trace.kind is TraceKind.PDM
    assert len(trace) == 40
    cert = result.certificates[0]
    assert not [w for w in cert.witnesses if w.label == "residual_bound"]
    residuals = [r.residual for r in trace.records]
    logger.info("Residual sums: head %.4g, tail %.4g", sum(residuals[:20]), sum(residuals[-20:]))
    assert sum(residuals[-20:]) < sum(residuals[:20])
    assert np.all(np.isfinite(result.u_final.data))


def _invertible_kernel() -> BlurKernel:
    """Cross-shaped blur whose transfer function stays within [0.6, 1]."""
    w = np.zeros((3, 3))
    w[1, 1] = 0.8
    w[0, 1] = w[2, 1] = w[1, 0] = w[1, 2] = 0.05
    return BlurKernel(w)


def test_normalized_cascade_contracts(gm: ConvNetModule, dm: ConvNetModule):
    """Check the contraction certificate of normalised modules on an invertible blur.

    The module constants are measured, and every ratio of consecutive residuals over
    30 unguarded steps must stay below the predicted factor.
    """
    sample = samples(Suite.NOISE)[0]
    y = conv2d_circular(sample.degraded, _invertible_kernel())
    g, d = an_normalize(gm, 0.05), an_normalize(dm, 0.05)
    delta_g = estimate_lipschitz(g).max_ratio
    delta_d = DEFAULT_ALPHA_D * estimate_lipschitz(d).max_ratio
    logger.info("Measured delta_g %.4g, delta_d %.4g", delta_g, delta_d)
    cert = certify_contraction(
        DeconvFidelity(y, _invertible_kernel()), g, d, delta_g, delta_d, u0=y, steps=30
    )
    assert cert.verdict is Verdict.PASS, cert.to_text()
    assert cert.parameters["max_ratio"] <= cert.parameters["factor"] + 1e-3


def test_contraction_fails_when_the_product_condition_breaks():
    """Check that an unnormalised harmful module leaves no admissible penalty."""
    sample = samples(Suite.NOISE)[0]
    y = conv2d_circular(sample.degraded, _invertible_kernel())
    harmful = adversarial_gm()
    delta_g = estimate_lipschitz(harmful).max_ratio
    cert = certify_contraction(
        DeconvFidelity(y, _invertible_kernel()), harmful, None, delta_g, 0.0, u0=y, steps=30
    )
    assert cert.parameters["product"] >= cert.parameters["product_bound"]
    assert cert.verdict is Verdict.FAIL
    assert [w.label for w in cert.witnesses] == ["product_condition"]


def test_contraction_fails_for_ill_conditioned_blur(gm: ConvNetModule):
    """Check that a nearly singular blur leaves no admissible penalty."""
    sample = samples(Suite.BLUR)[0]
    k = gaussian_kernel(5, 1.2)
    cert = certify_contraction(DeconvFidelity(sample.degraded, k), gm, None, 0.5, 0.0)
    assert cert.verdict is Verdict.FAIL


def test_uncontrolled_adversarial_run_breaks_descent():
    """Check that the harmful module raises the objective once the control check is off."""
    sample = samples(Suite.BLUR)[0]
    obj = Objective(
        DeconvFidelity(sample.degraded, sample.kernel), PriorSpec(1.0, 1e-3, Frame.WAVELET, 2)
    )
    _, trace = run_uncontrolled(
        obj, sample.degraded, adversarial_gm(), stop=StopCriteria(3), timing=False
    )
    assert certify_descent(trace).verdict is Verdict.FAIL
    _, guarded = run(obj, sample.degraded, adversarial_gm(), stop=StopCriteria(3), timing=False)
    assert certify_descent(guarded).passed
