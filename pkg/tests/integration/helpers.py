from enum import Enum

from grid import ImageGrid, psnr
from neural import ConvNetModule, make_gm
from synth import Sample, synthetic_suite


class Suite(Enum):
    """Synthetic benchmark suites."""

    BLUR = {"count": 20, "size": 64, "seed": 11, "kind": "blur", "sigma": 2.0}
    BLUR_NOISY = {"count": 20, "size": 64, "seed": 12, "kind": "blur", "sigma": 3.0}
    RAIN = {"count": 2, "size": 32, "seed": 13, "kind": "rain", "rain_density": 0.01}
    NOISE = {"count": 2, "size": 32, "seed": 14, "kind": "noise", "sigma": 3.0}


def samples(suite: Suite) -> list[Sample]:
    params = dict(suite.value)
    return synthetic_suite(params.pop("count"), params.pop("size"), params.pop("seed"), **params)


def adversarial_gm(scale: float = 20.0) -> ConvNetModule:
    """Untrained GM with amplified weights, pushing iterates far from any solution."""
    m = make_gm(width=4, depth=3, seed=99)
    for layer in m.layers:
        layer.weight *= scale
    return m


def gain(u: ImageGrid, sample: Sample) -> float:
    """PSNR improvement of ``u`` over the observation in dB."""
    return psnr(u, sample.clean) - psnr(sample.degraded, sample.clean)
