# Copyright 2025 The gdc-propagation authors.

"""Executable convergence certificates for propagation traces and module cascades."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

from errors import CertificationError, ConfigError
from fidelity import Fidelity
from grid import ImageGrid
from neural import DEFAULT_ALPHA_D, ConvNetModule, dm_apply, gm_apply
from propagate import (
    Branch,
    Objective,
    PropagationTrace,
    StopCriteria,
    TraceKind,
    run_uncontrolled,
)
from prox import Frame, PriorSpec

logger = logging.getLogger(__name__)

DESCENT_SLACK = 1e-8
CONTRACTION_SLACK = 1e-3
_RESIDUAL_FLOOR = 1e-9


class CertificateKind(Enum):
    """Property a certificate speaks about."""

    DESCENT = "descent"
    FIXED_POINT = "fixed_point"
    CONTRACTION = "contraction"
    CONDITION1 = "condition1"


class Verdict(Enum):
    """Certificate outcome."""

    PASS = "pass"
    FAIL = "fail"
    NOT_APPLICABLE = "not_applicable"


@dataclass(frozen=True)
class Witness:
    """A violated inequality ``lhs <= rhs`` at ``iteration`` (-1 for whole-trace checks)."""

    iteration: int
    lhs: float
    rhs: float
    label: str = ""


@dataclass
class Certificate:
    """Verdict with its witnesses and the constants it was computed from."""

    kind: CertificateKind
    verdict: Verdict
    witnesses: list[Witness] = field(default_factory=list)
    parameters: dict[str, Union[float, str]] = field(default_factory=dict)
    empirical: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        """Whether the verdict is a pass."""
        return self.verdict is Verdict.PASS

    def to_text(self) -> str:
        """Render as ``key: value`` lines."""
        lines = [
            f"kind: {self.kind.value}",
            f"verdict: {self.verdict.value}",
            f"empirical: {str(self.empirical).lower()}",
        ]
        lines += [f"parameter.{k}: {_fmt(v)}" for k, v in self.parameters.items()]
        lines += [
            f"witness: iteration={w.iteration} lhs={w.lhs!r} rhs={w.rhs!r}"
            + (f" check={w.label}" if w.label else "")
            for w in self.witnesses
        ]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _fmt(value: Union[float, str]) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _verdict(witnesses: list[Witness]) -> Verdict:
    return Verdict.FAIL if witnesses else Verdict.PASS


def certify_descent(trace: PropagationTrace, lipschitz: Optional[float] = None) -> Certificate:
    """Check ``Psi(u^t) - Psi(u^{t+1}) >= beta^t * d_t`` at every recorded step.

    ``beta^t = (L + gamma^t) / 2``. The slack is ``1e-8 * (1 + |Psi(u^t)|)`` per step. The
    telescoped sum ``sum beta^t d_t <= Psi(u^0) - Psi(u^T)`` is checked as well.

    Raises:
        CertificationError: if the trace comes from a partially defined objective.
    """
    if trace.kind is not TraceKind.FDM:
        raise CertificationError("descent certificates need a fully defined trace")
    lipschitz = trace.lipschitz if lipschitz is None else lipschitz
    psi = trace.objectives()
    witnesses = []
    total_decrease = 0.0
    total_slack = 0.0
    checked = 0
    for t, record in enumerate(trace.records):
        if t + 1 >= len(psi):
            break
        beta = 0.5 * (lipschitz + record.gamma)
        rhs = beta * (record.d_t or 0.0)
        lhs = psi[t] - psi[t + 1]
        slack = DESCENT_SLACK * (1.0 + abs(psi[t]))
        total_decrease += rhs
        total_slack += slack
        checked += 1
        if lhs < rhs - slack:
            witnesses.append(Witness(record.t, lhs, rhs, "sufficient_descent"))
    if checked and total_decrease > psi[0] - psi[checked] + total_slack:
        witnesses.append(Witness(-1, total_decrease, psi[0] - psi[checked], "telescoping"))
    cert = Certificate(
        CertificateKind.DESCENT,
        _verdict(witnesses),
        witnesses,
        {"L": float(lipschitz), "steps": float(checked)},
        notes=[
            "convergence of accumulation points to critical points is asymptotic; "
            "only its finite-horizon consequences are checked"
        ],
    )
    logger.info("Descent certificate: %s over %d steps", cert.verdict.value, checked)
    return cert


def cascade_displacement(
    gm: Optional[ConvNetModule],
    dm: Optional[ConvNetModule],
    u: ImageGrid,
    alpha_d: float = DEFAULT_ALPHA_D,
) -> float:
    """``||T_D(T_G(u)) - u||`` for the given (possibly absent) modules."""
    v = u if gm is None else gm_apply(gm, u)
    v = v if dm is None else dm_apply(dm, v, alpha_d)
    return (v - u).norm()


def certify_condition1(
    gm: Optional[ConvNetModule],
    dm: Optional[ConvNetModule],
    probes: Sequence[ImageGrid],
    gamma_seq: Sequence[float],
    c_budget: Optional[float] = None,
    alpha_d: float = DEFAULT_ALPHA_D,
) -> Certificate:
    """Fit the smallest ``c`` with ``||T_D(T_G(u)) - u|| <= sqrt(c / gamma^t)`` on probes.

    Without a budget the certificate only reports the fit and passes.

    Raises:
        ConfigError: if no probes or penalties are supplied.
    """
    if not probes or not gamma_seq:
        raise ConfigError("condition check needs probes and a gamma sequence")
    lhs = [cascade_displacement(gm, dm, u, alpha_d) for u in probes]
    worst = max(lhs)
    c_fit = worst**2 * max(gamma_seq)
    params: dict[str, Union[float, str]] = {"c_fit": c_fit, "max_displacement": worst}
    witnesses = []
    notes = []
    if c_budget is None:
        notes.append("no budget for c was given; the fitted value is reported only")
    else:
        params["c_budget"] = float(c_budget)
        for t, gamma in enumerate(gamma_seq):
            bound = math.sqrt(c_budget / gamma)
            if worst > bound:
                witnesses.append(Witness(t, worst, bound, "boundedness"))
    cert = Certificate(
        CertificateKind.CONDITION1, _verdict(witnesses), witnesses, params, notes=notes
    )
    logger.info("Boundedness certificate: %s, fitted c %.6g", cert.verdict.value, c_fit)
    return cert


def certify_fixed_point(
    trace: PropagationTrace, c: Optional[float] = None, scale: float = 1.0
) -> Certificate:
    """Check accepted residuals against ``L / gamma^t + sqrt(c / gamma^t)`` and tail decay.

    ``c`` defaults to the smallest value consistent with the recorded module
    displacements. Partial sums count as Cauchy evidence when the sum over the last half
    of the residuals is below the sum over the first half, or is zero.

    Raises:
        CertificationError: if the trace comes from a fully defined objective.
    """
    if trace.kind is not TraceKind.PDM:
        raise CertificationError("fixed-point certificates need a partially defined trace")
    lipschitz = scale * trace.lipschitz
    if c is None:
        c = max((r.displacement**2 * r.gamma for r in trace.records), default=0.0)
    witnesses = []
    for r in trace.records:
        if r.branch is not Branch.ACCEPTED:
            continue
        bound = lipschitz / r.gamma + math.sqrt(c / r.gamma)
        if r.residual > bound * (1.0 + 1e-9) + 1e-12:
            witnesses.append(Witness(r.t, r.residual, bound, "residual_bound"))
    residuals = [r.residual for r in trace.records]
    half = len(residuals) // 2
    params: dict[str, Union[float, str]] = {"L": lipschitz, "c": float(c)}
    notes = []
    if half:
        head = sum(residuals[:half])
        tail = sum(residuals[-half:])
        params.update(head_sum=head, tail_sum=tail)
        if not (tail < head or tail == 0.0):
            witnesses.append(Witness(-1, tail, head, "cauchy"))
    else:
        notes.append("trace too short for the partial-sum comparison")
    cert = Certificate(
        CertificateKind.FIXED_POINT, _verdict(witnesses), witnesses, params, notes=notes
    )
    logger.info("Fixed-point certificate: %s", cert.verdict.value)
    return cert


def contraction_interval(
    rho: float, lipschitz: float, delta_g: float, delta_d: float
) -> Optional[tuple[float, float]]:
    """Admissible penalties for the contraction result, or None when the product fails.

    The interval is nonempty exactly when
    ``(1 + delta_d) * (1 + delta_g) < (rho + L) / |rho - L|``.
    """
    product = (1.0 + delta_d) * (1.0 + delta_g)
    bound = math.inf if rho == lipschitz else (rho + lipschitz) / abs(rho - lipschitz)
    if not product < bound:
        return None
    low = 0.5 * (rho + lipschitz)
    scale = 2.0 * rho * lipschitz / (rho + lipschitz)
    high = math.inf if product == 1.0 else scale * product**2 / (product**2 - 1.0)
    return low, high


def contraction_factor(
    rho: float, lipschitz: float, gamma: float, delta_g: float, delta_d: float
) -> float:
    """Predicted Lipschitz constant of one cascade step at penalty ``gamma``."""
    inner = max(0.0, 1.0 - 2.0 * rho * lipschitz / (gamma * (rho + lipschitz)))
    return math.sqrt(inner) * (1.0 + delta_d) * (1.0 + delta_g)


def certify_contraction(
    fidelity: Fidelity,
    gm: Optional[ConvNetModule],
    dm: Optional[ConvNetModule],
    delta_g: float,
    delta_d: float,
    gamma: Optional[float] = None,
    prior: Optional[PriorSpec] = None,
    u0: Optional[ImageGrid] = None,
    steps: int = 0,
    alpha_d: float = DEFAULT_ALPHA_D,
) -> Certificate:
    """Evaluate the product condition, the admissible penalty interval and the factor.

    With ``u0`` and ``steps`` the unguarded cascade is iterated at the fixed penalty and
    every ratio of consecutive residuals must stay below the predicted factor plus 1e-3.
    The Lipschitz constants of the modules are usually measured, so the certificate is
    marked empirical.
    """
    rho = fidelity.strong_convexity()
    lipschitz = fidelity.lipschitz()
    product = (1.0 + delta_d) * (1.0 + delta_g)
    bound = math.inf if rho == lipschitz else (rho + lipschitz) / abs(rho - lipschitz)
    params: dict[str, Union[float, str]] = {
        "rho": rho,
        "L": lipschitz,
        "delta_g": float(delta_g),
        "delta_d": float(delta_d),
        "product": product,
        "product_bound": bound,
    }
    if rho <= 0:
        return Certificate(
            CertificateKind.CONTRACTION,
            Verdict.NOT_APPLICABLE,
            parameters=params,
            empirical=True,
            notes=["fidelity is not strongly convex"],
        )
    if prior is not None and prior.lam > 0 and prior.p != 1.0:
        return Certificate(
            CertificateKind.CONTRACTION,
            Verdict.NOT_APPLICABLE,
            parameters=params,
            empirical=True,
            notes=["prior is not convex"],
        )
    interval = contraction_interval(rho, lipschitz, delta_g, delta_d)
    if interval is None:
        cert = Certificate(
            CertificateKind.CONTRACTION,
            Verdict.FAIL,
            [Witness(-1, product, bound, "product_condition")],
            params,
            empirical=True,
            notes=["admissible gamma interval is empty"],
        )
        logger.info("Contraction certificate: fail, product %.6g >= %.6g", product, bound)
        return cert
    low, high = interval
    if gamma is None:
        gamma = 2.0 * low if math.isinf(high) else 0.5 * (low + high)
    factor = contraction_factor(rho, lipschitz, gamma, delta_g, delta_d)
    params.update(gamma_low=low, gamma_high=high, gamma=float(gamma), factor=factor)
    witnesses = []
    if not low <= gamma <= high:
        witnesses.append(Witness(-1, gamma, high if gamma > high else low, "gamma_range"))
    if u0 is not None and steps > 0:
        witnesses += _measure_contraction(
            fidelity, prior, gm, dm, u0, steps, gamma, alpha_d, factor, params
        )
    cert = Certificate(
        CertificateKind.CONTRACTION, _verdict(witnesses), witnesses, params, empirical=True
    )
    logger.info("Contraction certificate: %s, factor %.6g", cert.verdict.value, factor)
    return cert


def _measure_contraction(fidelity, prior, gm, dm, u0, steps, gamma, alpha_d, factor, params):
    prior = prior or PriorSpec(1.0, 0.0, Frame.IDENTITY)
    obj = Objective(fidelity, prior)
    _, trace = run_uncontrolled(
        obj, u0, gm, dm, StopCriteria(max_iters=steps), alpha_d, gamma=gamma, timing=False
    )
    residuals = [r.residual for r in trace.records]
    witnesses = []
    worst = 0.0
    for t in range(1, len(residuals)):
        if residuals[t - 1] < _RESIDUAL_FLOOR:
            continue
        ratio = residuals[t] / residuals[t - 1]
        worst = max(worst, ratio)
        if ratio > factor + CONTRACTION_SLACK:
            witnesses.append(Witness(t, ratio, factor, "residual_ratio"))
    params["max_ratio"] = worst
    return witnesses
