#!/usr/bin/env python3
# Copyright 2025 The gdc-propagation authors.

"""Command line: train modules, run tasks, synthesize data, certify and benchmark."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from certify import (
    Certificate,
    Verdict,
    certify_condition1,
    certify_contraction,
    certify_descent,
    certify_fixed_point,
)
from config import RunConfig, parse_pairs
from errors import ConfigError, ExitCode, GDCError, PropagationError
from fidelity import DeconvFidelity
from grid import ImageGrid, conv2d_circular
from image_io import atomic_write, load_image, load_kernel, load_mask, save_image, save_kernel
from neural import (
    ConvNetModule,
    Role,
    TrainConfig,
    an_normalize,
    estimate_lipschitz,
    load_checkpoint,
    make_dm,
    make_gm,
    save_checkpoint,
    train_dm,
    train_gm,
)
from propagate import GammaSchedule, TraceKind, read_trace, write_trace
from synth import (
    IMAGE_SUFFIXES,
    Sample,
    add_noise,
    read_dataset,
    synthetic_image,
    synthetic_suite,
    write_dataset,
)
from tasks import TaskResult, TaskSpec, resolve_workers, run_ablation, run_many

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _atomic_text(path: Path, lines: Sequence[str]) -> Path:
    return atomic_write(path, "\n".join(lines) + "\n")


def _write_certificates(path: Path, certificates: Sequence[Certificate]) -> Path:
    return atomic_write(path, "\n".join(c.to_text() for c in certificates))


def _verdict_code(certificates: Sequence[Certificate]) -> ExitCode:
    if any(c.verdict is Verdict.FAIL for c in certificates):
        return ExitCode.CERTIFICATION_FAILED
    return ExitCode.OK


# Modules


def load_corpus(cfg: RunConfig) -> list[ImageGrid]:
    """Clean training images from the corpus directory, or a seeded synthetic corpus."""
    if cfg["corpus"]:
        directory = Path(cfg["corpus"])
        if not directory.is_dir():
            raise ConfigError(f"corpus directory {directory} does not exist")
        paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise ConfigError(f"corpus directory {directory} holds no images")
        return [load_image(p) for p in paths]
    rng = cfg.rng("init")
    size = max(int(cfg["patch-size"]), 8)
    return [synthetic_image(size, rng) for _ in range(int(cfg["corpus-size"]))]


def train_module(cfg: RunConfig, role: Role, corpus: Sequence[ImageGrid]):
    """Build and train one module as configured; AN is applied afterwards when enabled."""
    seed = int(cfg["seed"])
    step = cfg["gm-step-size"] if role is Role.GM else cfg["dm-step-size"]
    train_cfg = TrainConfig(
        noise_levels=cfg.floats("noise-levels"),
        patch_size=int(cfg["patch-size"]),
        epochs=int(cfg["epochs"]),
        step_size=float(step),
        batch_size=int(cfg["batch-size"]),
        seed=seed,
    )
    width = int(cfg["width"])
    if role is Role.GM:
        result = train_gm(make_gm(1, width, int(cfg["gm-depth"]), seed), corpus, train_cfg)
    else:
        result = train_dm(make_dm(1, width, int(cfg["dm-depth"]), seed), corpus, train_cfg)
    if cfg["an"]:
        result.module = an_normalize(result.module, float(cfg["delta"]))
    return result


def load_modules(
    cfg: RunConfig,
) -> tuple[Optional[ConvNetModule], Optional[ConvNetModule]]:
    """Modules named by the checkpoint options, normalized when AN is enabled."""
    modules = []
    for key, role in (("gm-checkpoint", Role.GM), ("dm-checkpoint", Role.DM)):
        if not cfg[key]:
            modules.append(None)
            continue
        m = load_checkpoint(cfg[key])
        if m.role is not role:
            raise ConfigError(f"{key} holds a {m.role.value} module, expected {role.value}")
        if cfg["an"]:
            m = an_normalize(m, float(cfg["delta"]))
        modules.append(m)
    return modules[0], modules[1]


def load_samples(cfg: RunConfig) -> list[Sample]:
    """The dataset directory or single image named by ``input``."""
    if not cfg["input"]:
        raise ConfigError("no input given")
    path = Path(cfg["input"])
    if path.is_dir():
        return read_dataset(path)
    return [
        Sample(
            path.stem,
            load_image(path),
            load_image(cfg["ground-truth"]) if cfg["ground-truth"] else None,
            load_kernel(cfg["kernel"]) if cfg["kernel"] else None,
            load_mask(cfg["mask"]) if cfg["mask"] else None,
        )
    ]


# Subcommands


def cmd_train(cfg: RunConfig, out: Path, args: argparse.Namespace) -> ExitCode:
    """Train the configured module and write its checkpoint and loss curve."""
    name = args.role or cfg["role"]
    try:
        role = Role(name)
    except ValueError:
        raise ConfigError(f"unknown role '{name}', expected gm or dm") from None
    result = train_module(cfg, role, load_corpus(cfg))
    save_checkpoint(out / f"{role.value}.gdcw", result.module)
    lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(result.losses)]
    _atomic_text(out / f"{role.value}_loss.csv", lines)
    if result.accuracy is not None:
        _atomic_text(out / f"{role.value}_accuracy.txt", [f"accuracy={result.accuracy!r}"])
    logger.info("Trained %s written to %s", role.value, out)
    return ExitCode.OK


def _write_result(out: Path, result: TaskResult) -> None:
    name = result.name
    suffix = ".pgm" if result.u_final.channels == 1 else ".ppm"
    save_image(out / f"{name}{suffix}", result.u_final.clip())
    write_trace(out / f"{name}.trace.csv", result.traces[-1])
    for i, trace in enumerate(result.traces[:-1]):
        write_trace(out / f"{name}.inner{i:02d}.trace.csv", trace)
    _write_certificates(out / f"{name}.cert.txt", result.certificates)
    atomic_write(out / f"{name}.metrics.txt", result.summary())
    if result.kernel is not None:
        save_kernel(out / f"{name}.kernel", result.kernel)


def cmd_run(cfg: RunConfig, out: Path, args: argparse.Namespace) -> ExitCode:
    """Run the configured task on every input image."""
    gm, dm = load_modules(cfg)
    specs = [TaskSpec.from_config(cfg, s, gm, dm) for s in load_samples(cfg)]
    try:
        results = run_many(specs, resolve_workers(int(cfg["workers"])))
    except PropagationError as e:
        if e.trace is not None:
            write_trace(out / f"{e.name or 'failed'}.trace.csv", e.trace)
        raise
    for result in results:
        _write_result(out, result)

    lines = [f"images={len(results)}"]
    for key in ("psnr", "psnr_input", "ssim", "iterations", "accept_rate", "kernel_error"):
        values = [r.metrics[key] for r in results if key in r.metrics]
        if values:
            lines.append(f"mean_{key}={float(np.mean(values))!r}")
    _atomic_text(out / "summary.txt", lines)
    return _verdict_code([c for r in results for c in r.certificates])


def cmd_synth(cfg: RunConfig, out: Path, args: argparse.Namespace) -> ExitCode:
    """Write a seeded synthetic dataset."""
    samples = synthetic_suite(
        int(cfg["count"]),
        int(cfg["size"]),
        int(cfg["seed"]),
        cfg["kind"],
        sigma=float(cfg["sigma"]),
        missing_rate=float(cfg["missing-rate"]),
        blur_size=int(cfg["blur-size"]),
        blur_sigma=float(cfg["blur-sigma"]),
        rain_density=float(cfg["rain-density"]),
    )
    write_dataset(out, samples)
    return ExitCode.OK


def _certify_trace(cfg: RunConfig, path: str) -> list[Certificate]:
    trace = read_trace(path)
    if trace.kind is TraceKind.FDM:
        return [certify_descent(trace)]
    return [certify_fixed_point(trace, cfg["c-budget"], float(cfg["pdm-scale"]))]


def _certify_modules(cfg: RunConfig) -> list[Certificate]:
    gm, dm = load_modules(cfg)
    if gm is None and dm is None:
        raise ConfigError("certify needs a trace file or at least one module checkpoint")
    rng = cfg.rng("probe")
    size = int(cfg["size"])
    alpha_d = float(cfg["alpha-d"])
    probes = [
        add_noise(synthetic_image(size, rng), float(cfg["sigma"]), rng)
        for _ in range(int(cfg["probes"]))
    ]
    schedule = GammaSchedule(float(cfg["gamma0"]), float(cfg["eta"]))
    gammas = [schedule.gamma(t) for t in range(int(cfg["max-iters"]))]
    certificates = [certify_condition1(gm, dm, probes, gammas, cfg["c-budget"], alpha_d)]
    if cfg["kernel"]:
        kernel = load_kernel(cfg["kernel"])
        samples = int(cfg["lipschitz-samples"])
        seed = int(cfg["seed"])
        delta_g = 0.0 if gm is None else estimate_lipschitz(gm, samples, seed).max_ratio
        delta_d = 0.0 if dm is None else alpha_d * estimate_lipschitz(dm, samples, seed).max_ratio
        if gm is not None and gm.an_state is not None:
            logger.info(
                "Measured delta_g %.6g against the normalisation target %.6g",
                delta_g,
                gm.an_state.delta,
            )
        logger.info("Contraction check with delta_g %.6g, delta_d %.6g", delta_g, delta_d)
        y = conv2d_circular(probes[0], kernel)
        certificates.append(
            certify_contraction(
                DeconvFidelity(y, kernel),
                gm,
                dm,
                delta_g,
                delta_d,
                u0=y,
                steps=int(cfg["max-iters"]),
                alpha_d=alpha_d,
            )
        )
    return certificates


def cmd_certify(cfg: RunConfig, out: Path, args: argparse.Namespace) -> ExitCode:
    """Certify a trace file, or the configured modules; the exit code carries the verdict."""
    certificates = _certify_trace(cfg, args.trace) if args.trace else _certify_modules(cfg)
    path = _write_certificates(out / "certificate.txt", certificates)
    if not args.quiet:
        sys.stdout.write(path.read_text())
    return _verdict_code(certificates)


def _histogram_lines(label: str, estimate) -> list[str]:
    counts, edges = estimate.histogram
    lines = [f"{label}.max_ratio={estimate.max_ratio!r}"]
    for count, low, high in zip(counts, edges[:-1], edges[1:]):
        lines.append(f"{label}.bin=[{low:.6g},{high:.6g}) count={int(count)}")
    return lines


def cmd_bench(cfg: RunConfig, out: Path, args: argparse.Namespace) -> ExitCode:
    """Ablation of the module schemes and Lipschitz statistics with and without AN."""
    gm, dm = load_modules(cfg)
    if gm is None or dm is None:
        corpus = load_corpus(cfg)
        untouched = cfg.replace(an=False)
        gm = gm or train_module(untouched, Role.GM, corpus).module
        dm = dm or train_module(untouched, Role.DM, corpus).module
    samples = synthetic_suite(
        int(cfg["count"]),
        int(cfg["size"]),
        int(cfg["seed"]),
        "blur",
        sigma=float(cfg["sigma"]),
        blur_size=int(cfg["blur-size"]),
        blur_sigma=float(cfg["blur-sigma"]),
    )
    spec = TaskSpec.from_config(cfg, samples[0], task="deconvolution")
    means = run_ablation(
        samples,
        gm,
        dm,
        workers=resolve_workers(int(cfg["workers"])),
        lam=spec.lam,
        schedule=spec.schedule,
        stop=spec.stop,
        control=spec.control,
        alpha_d=spec.alpha_d,
        init=spec.init,
        wavelet_levels=spec.wavelet_levels,
        timing=spec.timing,
    )
    _atomic_text(out / "ablation.txt", [f"{s.value}={v!r}" for s, v in means.items()])

    samples_count = int(cfg["lipschitz-samples"])
    seed = int(cfg["seed"])
    plain = estimate_lipschitz(gm, samples_count, seed)
    normalized = estimate_lipschitz(an_normalize(gm, float(cfg["delta"])), samples_count, seed)
    _atomic_text(
        out / "lipschitz.txt",
        _histogram_lines("without_an", plain) + _histogram_lines("with_an", normalized),
    )
    return ExitCode.OK


COMMANDS = {
    "train": cmd_train,
    "run": cmd_run,
    "synth": cmd_synth,
    "certify": cmd_certify,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subparser per command."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="override the seed option")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one option, may be repeated",
    )
    parser = argparse.ArgumentParser(
        prog="gdc", description="Guarded propagation of learned restoration modules."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train", parents=[common], help="train a GM or DM")
    train.add_argument("role", nargs="?", choices=[r.value for r in Role])
    sub.add_parser("run", parents=[common], help="run the configured task")
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    certify = sub.add_parser("certify", parents=[common], help="certify a trace or modules")
    certify.add_argument("trace", nargs="?", help="trace CSV; omitted certifies the modules")
    sub.add_parser("bench", parents=[common], help="ablation and AN statistics")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)
    try:
        overrides = parse_pairs("\n".join(args.set))
        cfg = RunConfig.from_file(args.config, seed=args.seed, **overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "config.txt", cfg.to_text())
        code = COMMANDS[args.command](cfg, out, args)
    except GDCError as e:
        logger.error("%s failed: %s", args.command, e)
        return int(e.exit_code)
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        return int(ExitCode.INPUT_ERROR)
    logger.info("%s finished with exit code %d", args.command, int(code))
    return int(code)


if __name__ == "__main__":  # pragma: nocover
    sys.exit(main())
