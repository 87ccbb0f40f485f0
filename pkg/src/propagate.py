# Copyright 2025 The gdc-propagation authors.

"""Controlled propagation of the generative, discriminative and corrective cascade.

An objective with a prior (fully defined) is guarded by the objective-monotonicity check,
an objective without one (partially defined) by the fidelity-gradient bound. Every step
is recorded in a :class:`PropagationTrace` for certification.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

from errors import ConfigError, NonFiniteError, PropagationError, TraceFormatError
from fidelity import Fidelity
from grid import ImageGrid
from image_io import atomic_write
from neural import DEFAULT_ALPHA_D, ConvNetModule, dm_apply, gm_apply
from prox import PriorSpec, prior_value, prox_prior

logger = logging.getLogger(__name__)

TRACE_HEADER = "t,objective,residual,branch,gamma,beta,d_t,ms"


class Branch(Enum):
    """Outcome of the control check of one step."""

    ACCEPTED = "accepted"
    REJECTED = "rejected"
    UNCHECKED = "unchecked"


class TraceKind(Enum):
    """Objective family a trace was produced for."""

    FDM = "fdm"
    PDM = "pdm"


@dataclass(frozen=True)
class GammaSchedule:
    """Geometric penalty schedule ``gamma^t = gamma0 * eta**t``."""

    gamma0: float = 1.0
    eta: float = 1.5

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ConfigError(f"gamma0 must be positive, got {self.gamma0}")
        if not self.eta > 1:
            raise ConfigError(f"eta must exceed 1, got {self.eta}")

    def gamma(self, t: int) -> float:
        """Penalty at iteration ``t``, built by repeated multiplication."""
        g = self.gamma0
        for _ in range(t):
            g = self.eta * g
        return g


@dataclass(frozen=True)
class Objective:
    """``f + phi`` when a prior is present, ``f`` alone otherwise."""

    fidelity: Fidelity
    prior: Optional[PriorSpec] = None
    schedule: GammaSchedule = field(default_factory=GammaSchedule)

    @property
    def kind(self) -> TraceKind:
        """FDM with a prior, PDM without."""
        return TraceKind.PDM if self.prior is None else TraceKind.FDM

    def value(self, u: ImageGrid) -> float:
        """``Psi(u)`` for FDM objectives, ``f(u)`` for PDM ones."""
        value = self.fidelity.evaluate(u)
        if self.prior is not None:
            value += prior_value(u, self.prior)
        return value

    def prox_gradient(self, u: ImageGrid, tau: float) -> ImageGrid:
        """``prox_{tau, phi}(u - grad f(u) / tau)``; a plain gradient step without a prior."""
        step = u - self.fidelity.gradient(u) / tau
        return step if self.prior is None else prox_prior(step, self.prior, tau)


@dataclass(frozen=True)
class StopCriteria:
    """Stopping rules; tolerances of 0 are disabled."""

    max_iters: int = 50
    residual_tol: float = 0.0
    reconstruction_tol: float = 0.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be at least 1, got {self.max_iters}")


@dataclass
class StepRecord:
    """Ledger entry of iteration ``t``.

    ``objective`` is the value at ``u^t``; ``residual`` is ``||u^{t+1} - u^t||`` and
    ``displacement`` is ``||u_d - u^t||``, the move made by the learned modules.
    """

    t: int
    objective: float
    residual: float
    branch: Branch
    gamma: float
    beta: Optional[float] = None
    d_t: Optional[float] = None
    ms: float = 0.0
    displacement: float = 0.0


@dataclass
class PropagationTrace:
    """Per-iteration records plus the objective value after the last step."""

    kind: TraceKind
    lipschitz: float
    records: list[StepRecord] = field(default_factory=list)
    final_objective: Optional[float] = None

    def __len__(self) -> int:
        return len(self.records)

    def objectives(self) -> list[float]:
        """Objective values at ``u^0 .. u^T``."""
        values = [r.objective for r in self.records]
        if self.final_objective is not None:
            values.append(self.final_objective)
        return values

    def accept_rate(self) -> float:
        """Fraction of steps the control check accepted."""
        if not self.records:
            return 0.0
        return sum(r.branch is not Branch.REJECTED for r in self.records) / len(self.records)

    def to_csv(self) -> str:
        """Serialise with the fixed header; metadata follows as ``# key=value`` lines."""
        lines = [TRACE_HEADER]
        for r in self.records:
            beta = "" if r.beta is None else repr(r.beta)
            d_t = "" if r.d_t is None else repr(r.d_t)
            lines.append(
                f"{r.t},{r.objective!r},{r.residual!r},{r.branch.value},{r.gamma!r},"
                f"{beta},{d_t},{r.ms!r}"
            )
        lines.append(f"# kind={self.kind.value}")
        lines.append(f"# lipschitz={self.lipschitz!r}")
        if self.final_objective is not None:
            lines.append(f"# final_objective={self.final_objective!r}")
        lines.append("# displacement=" + ";".join(repr(r.displacement) for r in self.records))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "PropagationTrace":
        """Parse :meth:`to_csv` output.

        Raises:
            TraceFormatError: if the text is empty or malformed.
        """
        lines = [line.strip() for line in text.splitlines() if line.strip()]
        if not lines or lines[0] != TRACE_HEADER:
            raise TraceFormatError("trace is empty or lacks the expected header")
        meta: dict[str, str] = {}
        rows = []
        for line in lines[1:]:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            else:
                rows.append(line.split(","))
        if not rows:
            raise TraceFormatError("trace has no iterations")
        try:
            trace = cls(TraceKind(meta.get("kind", "fdm")), float(meta.get("lipschitz", "nan")))
            displacements = [float(v) for v in meta.get("displacement", "").split(";") if v]
            for i, row in enumerate(rows):
                t, obj, res, branch, gamma, beta, d_t, ms = row
                trace.records.append(
                    StepRecord(
                        t=int(t),
                        objective=float(obj),
                        residual=float(res),
                        branch=Branch(branch),
                        gamma=float(gamma),
                        beta=float(beta) if beta else None,
                        d_t=float(d_t) if d_t else None,
                        ms=float(ms),
                        displacement=displacements[i] if i < len(displacements) else 0.0,
                    )
                )
            if "final_objective" in meta:
                trace.final_objective = float(meta["final_objective"])
        except ValueError as e:
            raise TraceFormatError(f"malformed trace: {e}") from None
        return trace


def write_trace(path: Union[str, Path], trace: PropagationTrace) -> Path:
    """Write a trace CSV atomically."""
    return atomic_write(path, trace.to_csv())


def read_trace(path: Union[str, Path]) -> PropagationTrace:
    """Read a trace CSV written by :func:`write_trace`."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise TraceFormatError(f"cannot read trace {path}: {e}") from None
    return PropagationTrace.from_csv(text)


def _stage(name: str, t: int, fn, *args):
    try:
        out = fn(*args)
    except NonFiniteError:
        raise PropagationError(name, t) from None
    if isinstance(out, float) and not math.isfinite(out):
        raise PropagationError(name, t)
    return out


def _cascade(
    u: ImageGrid,
    gm: Optional[ConvNetModule],
    dm: Optional[ConvNetModule],
    t: int,
    alpha_d: float,
) -> ImageGrid:
    u_g = u if gm is None else _stage("generative", t, gm_apply, gm, u)
    return u_g if dm is None else _stage("discriminative", t, dm_apply, dm, u_g, alpha_d)


def step_fdm(
    obj: Objective,
    u: ImageGrid,
    gm: Optional[ConvNetModule],
    dm: Optional[ConvNetModule],
    t: int,
    alpha_d: float = DEFAULT_ALPHA_D,
) -> tuple[ImageGrid, StepRecord]:
    """One guarded step for a fully defined objective.

    The corrective module takes ``u_c = prox_{gamma, phi}(u_d - grad f(u_d) / gamma)``;
    ``v = u_c`` when ``Psi(u_c) <= Psi(u)`` and ``v = u`` otherwise. The closing proximal
    gradient step uses ``tau = gamma + 2L``, which guarantees
    ``Psi(v) - Psi(u_next) >= beta * ||u_next - v||**2`` with ``beta = (L + gamma) / 2``.

    Args:
        obj: a fully defined objective.
        u: current iterate.
        gm: generative module, or None to skip it.
        dm: discriminative module, or None to skip it.
        t: iteration index.
        alpha_d: discriminative step.

    Returns:
        The next iterate and the step record.

    Raises:
        ConfigError: if the objective has no prior.
        PropagationError: if a stage produces non-finite values.
    """
    if obj.kind is not TraceKind.FDM:
        raise ConfigError("step_fdm needs an objective with a prior")
    start = time.perf_counter()
    gamma = obj.schedule.gamma(t)
    lipschitz = obj.fidelity.lipschitz()
    psi_u = obj.value(u)

    u_d = _cascade(u, gm, dm, t, alpha_d)
    u_c = _stage("corrective", t, obj.prox_gradient, u_d, gamma)
    psi_c = _stage("check", t, obj.value, u_c)
    if psi_c <= psi_u:
        v, branch = u_c, Branch.ACCEPTED
    else:
        v, branch = u, Branch.REJECTED

    tau = gamma + 2.0 * lipschitz
    u_next = _stage("proximal", t, obj.prox_gradient, v, tau)
    record = StepRecord(
        t=t,
        objective=psi_u,
        residual=(u_next - u).norm(),
        branch=branch,
        gamma=gamma,
        beta=0.5 * (lipschitz + gamma),
        d_t=(u_next - v).norm() ** 2,
        ms=1000.0 * (time.perf_counter() - start),
        displacement=(u_d - u).norm(),
    )
    logger.debug("FDM step %d: %s, Psi %.6g", t, branch.value, psi_u)
    return u_next, record


def step_pdm(
    obj: Objective,
    u: ImageGrid,
    gm: Optional[ConvNetModule],
    dm: Optional[ConvNetModule],
    t: int,
    alpha_d: float = DEFAULT_ALPHA_D,
    scale: float = 1.0,
) -> tuple[ImageGrid, StepRecord]:
    """One guarded step for a partially defined objective.

    ``u_c`` solves the penalized fidelity problem around ``u_d``; it is accepted when
    ``||grad f(u_c)|| <= scale * L``. A rejected step returns ``u`` itself.

    Raises:
        ConfigError: if the objective has a prior.
        PropagationError: if a stage produces non-finite values.
    """
    if obj.kind is not TraceKind.PDM:
        raise ConfigError("step_pdm needs an objective without a prior")
    start = time.perf_counter()
    gamma = obj.schedule.gamma(t)
    lipschitz = obj.fidelity.lipschitz()

    u_d = _cascade(u, gm, dm, t, alpha_d)
    u_c = _stage("corrective", t, obj.fidelity.penalized_solve, u_d, gamma)
    if obj.fidelity.gradient(u_c).norm() <= scale * lipschitz:
        u_next, branch = u_c, Branch.ACCEPTED
    else:
        u_next, branch = u, Branch.REJECTED
    record = StepRecord(
        t=t,
        objective=obj.fidelity.evaluate(u),
        residual=(u_next - u).norm(),
        branch=branch,
        gamma=gamma,
        ms=1000.0 * (time.perf_counter() - start),
        displacement=(u_d - u).norm(),
    )
    logger.debug("PDM step %d: %s", t, branch.value)
    return u_next, record


def step_cascade(
    obj: Objective,
    u: ImageGrid,
    gm: Optional[ConvNetModule],
    dm: Optional[ConvNetModule],
    t: int,
    alpha_d: float = DEFAULT_ALPHA_D,
    correct: bool = True,
    gamma: Optional[float] = None,
) -> tuple[ImageGrid, StepRecord]:
    """One unguarded step ``C(D(G(u)))``.

    The corrective module is the proximal gradient step for fully defined objectives and
    the penalized solve otherwise; with ``correct=False`` it is skipped. ``gamma``
    overrides the schedule to iterate a fixed operator.
    """
    start = time.perf_counter()
    gamma = obj.schedule.gamma(t) if gamma is None else gamma
    value = obj.value(u)
    u_d = _cascade(u, gm, dm, t, alpha_d)
    if not correct:
        u_next = u_d
    elif obj.kind is TraceKind.FDM:
        u_next = _stage("corrective", t, obj.prox_gradient, u_d, gamma)
    else:
        u_next = _stage("corrective", t, obj.fidelity.penalized_solve, u_d, gamma)
    record = StepRecord(
        t=t,
        objective=value,
        residual=(u_next - u).norm(),
        branch=Branch.UNCHECKED,
        gamma=gamma,
        ms=1000.0 * (time.perf_counter() - start),
        displacement=(u_d - u).norm(),
    )
    return u_next, record


def _should_stop(
    record: StepRecord, u: ImageGrid, stop: StopCriteria, kind: TraceKind
) -> bool:
    # a rejected PDM step returns u itself; the next, larger gamma may still move it
    if kind is TraceKind.PDM and record.branch is Branch.REJECTED:
        return False
    if stop.residual_tol > 0 and record.residual <= stop.residual_tol:
        return True
    if stop.reconstruction_tol > 0:
        return record.residual <= stop.reconstruction_tol * max(u.norm(), 1e-12)
    return False


def _loop(obj: Objective, u0: ImageGrid, stop: StopCriteria, trace, step, timing: bool):
    u = u0
    for t in range(stop.max_iters):
        try:
            u_next, record = step(u, t)
        except PropagationError as e:
            e.trace = trace
            logger.error("Propagation failed at iteration %d in stage %s", t, e.stage)
            raise
        if not timing:
            record.ms = 0.0
        trace.records.append(record)
        done = _should_stop(record, u, stop, trace.kind)
        u = u_next
        if done:
            break
    trace.final_objective = obj.value(u)
    return u, trace


def run(
    obj: Objective,
    u0: ImageGrid,
    gm: Optional[ConvNetModule] = None,
    dm: Optional[ConvNetModule] = None,
    stop: Optional[StopCriteria] = None,
    alpha_d: float = DEFAULT_ALPHA_D,
    pdm_scale: float = 1.0,
    timing: bool = True,
) -> tuple[ImageGrid, PropagationTrace]:
    """Iterate the guarded step matching the objective until a stop rule fires.

    Rejected fully defined steps still take the proximal gradient step and may stop the
    run. Rejected partially defined steps leave the iterate in place and never do.

    Raises:
        PropagationError: with the partial trace attached.
    """
    stop = stop or StopCriteria()
    trace = PropagationTrace(obj.kind, obj.fidelity.lipschitz())
    if obj.kind is TraceKind.FDM:

        def step(u, t):
            return step_fdm(obj, u, gm, dm, t, alpha_d)

    else:

        def step(u, t):
            return step_pdm(obj, u, gm, dm, t, alpha_d, pdm_scale)

    u, trace = _loop(obj, u0, stop, trace, step, timing)
    logger.info(
        "Propagation finished after %d iterations, objective %.6g, accept rate %.2f",
        len(trace),
        trace.final_objective,
        trace.accept_rate(),
    )
    return u, trace


def run_uncontrolled(
    obj: Objective,
    u0: ImageGrid,
    gm: Optional[ConvNetModule] = None,
    dm: Optional[ConvNetModule] = None,
    stop: Optional[StopCriteria] = None,
    alpha_d: float = DEFAULT_ALPHA_D,
    correct: bool = True,
    gamma: Optional[float] = None,
    timing: bool = True,
) -> tuple[ImageGrid, PropagationTrace]:
    """Iterate :func:`step_cascade` without any control check."""
    stop = stop or StopCriteria()
    trace = PropagationTrace(obj.kind, obj.fidelity.lipschitz())

    def step(u, t):
        return step_cascade(obj, u, gm, dm, t, alpha_d, correct, gamma)

    return _loop(obj, u0, stop, trace, step, timing)
