# Copyright 2025 The gdc-propagation authors.

"""Exception hierarchy shared by the propagation library and its command line."""

from enum import IntEnum
from typing import Any


class ExitCode(IntEnum):
    """Stable process exit codes of the command line."""

    OK = 0
    INPUT_ERROR = 2
    TRAINING_DIVERGED = 3
    PROPAGATION_FAILED = 4
    CERTIFICATION_FAILED = 5


class GDCError(Exception):
    """Base class for every error raised by this package."""

    exit_code = ExitCode.INPUT_ERROR


class DimensionError(GDCError, ValueError):
    """Shapes or sizes of the operands do not agree."""


class NonFiniteError(GDCError, ValueError):
    """A NaN or infinite value was produced or supplied."""


class ConfigError(GDCError, ValueError):
    """An option is unknown, malformed or outside its valid range."""


class CheckpointError(GDCError):
    """A weight checkpoint could not be decoded."""


class TrainingError(GDCError):
    """Training diverged."""

    exit_code = ExitCode.TRAINING_DIVERGED

    def __init__(self, epoch: int, message: str = "training loss is not finite"):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class PropagationError(GDCError):
    """A propagation step produced an unusable iterate.

    The partially filled trace is attached so callers can still persist it.
    """

    exit_code = ExitCode.PROPAGATION_FAILED

    def __init__(self, stage: str, t: int, trace: Any = None, name: str = ""):
        super().__init__(f"non-finite values after stage '{stage}' at iteration {t}")
        self.stage = stage
        self.t = t
        self.trace = trace
        self.name = name


class CertificationError(GDCError):
    """A certificate was requested for a trace of the wrong kind."""


class TraceFormatError(GDCError, ValueError):
    """A trace file is empty or cannot be parsed."""
