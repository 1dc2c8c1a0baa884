"""Command-line interface.

Subcommands: ``train``, ``enhance``, ``evaluate``, ``degrade``,
``complexity``, ``bench``.  Exit codes: 0 success, 1 usage error,
2 runtime or data error (diagnostics on standard error).  The compute
device is selected with the ``AQUADIFF_DEVICE`` environment variable
(default ``cpu``).
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

from . import __version__

USAGE_ERROR = 1
RUNTIME_ERROR = 2

METRIC_COLUMNS = ("set", "name", "psnr", "ssim", "uciqe", "uiqm", "uicm", "uism", "uiconm")


def _device(config_device: str = "cpu") -> str:
    return os.environ.get("AQUADIFF_DEVICE", config_device)


def _load_config(path: str | None):
    from .config import full_run_config, load_run_config

    if path is None:
        return full_run_config()
    return load_run_config(path)


def _png_inputs(path: Path) -> list[Path]:
    from .data import DatasetError

    if path.is_file():
        return [path]
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DatasetError(f"no PNG files under {path}")
        return files
    raise DatasetError(f"input not found: {path}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint
    from .config import ConfigFileError
    from .data import discover_pairs
    from .networks import ModelBundle
    from .training import train_loop

    config = _load_config(args.config)
    if config.data_root is None:
        raise ConfigFileError("train requires data_root in the config file")
    device = _device(config.device)
    dataset = discover_pairs(config.data_root)

    optimizer_state = None
    if args.resume is not None:
        bundle, optimizer_state = load_checkpoint(
            args.resume, device=device, load_optimizer=True
        )
    else:
        bundle = ModelBundle.create(
            config.schedule.build(),
            config.unet,
            config.phys,
            ema_decay=config.train.ema_decay,
            seed=config.seed,
        ).to(device)

    workdir = Path(config.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log_path = workdir / "train_log.csv"
    ckpt_path = workdir / "checkpoint.zip"
    print(
        f"training on {len(dataset)} pairs, seed {config.seed}, device {device}; "
        f"log {log_path}, checkpoint {ckpt_path}"
    )
    state = train_loop(
        bundle,
        dataset,
        config.train,
        log_path=log_path,
        checkpoint_path=ckpt_path,
        optimizer_state=optimizer_state,
        echo=True,
    )
    print(f"finished at step {state.bundle.step}")
    return 0


def cmd_enhance(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_image, resize, save_image
    from .sampler import enhance, plan_subsequence

    device = _device()
    bundle, _ = load_checkpoint(args.ckpt, device=device)
    resolution = bundle.unet_config.input_resolution
    plan = plan_subsequence(bundle.schedule.timesteps, args.steps)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"enhancing with {plan.steps} steps, seed {args.seed}, device {device}")
    for path in _png_inputs(Path(args.input)):
        img = load_image(path)
        if img.shape[:2] != (resolution, resolution):
            img = resize(img, resolution)
        result = enhance(img, bundle, plan=plan, seed=args.seed, phi_time=args.phi_time)
        target = out_dir / path.name
        save_image(result.enhanced, target)
        print(f"{path.name}: {result.total_seconds:.3f}s -> {target}")
    return 0


def _format_metric(value: float | None) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def _metric_rows(set_name, image_dir, reference_dir, writer) -> None:
    from .data import DatasetError, load_image, resize
    from .metrics import metric_report

    files = sorted(Path(image_dir).glob("*.png"))
    if not files:
        raise DatasetError(f"no PNG files under {image_dir}")
    sums: dict[str, float] = {}
    count = 0
    for path in files:
        img = load_image(path)
        reference = None
        if reference_dir is not None:
            ref_path = Path(reference_dir) / path.name
            if not ref_path.exists():
                raise DatasetError(f"no reference for {path.name}")
            reference = load_image(ref_path)
            if reference.shape != img.shape:
                reference = resize(reference, img.shape[:2])
        report = metric_report(img, reference)
        row = {
            "psnr": report.psnr,
            "ssim": report.ssim,
            "uciqe": report.uciqe,
            "uiqm": report.uiqm,
            "uicm": report.uicm,
            "uism": report.uism,
            "uiconm": report.uiconm,
        }
        writer.writerow([set_name, path.stem] + [_format_metric(v) for v in row.values()])
        for key, value in row.items():
            if value is not None:
                sums[key] = sums.get(key, 0.0) + value
        count += 1
    means = [
        _format_metric(sums[key] / count if key in sums else None)
        for key in ("psnr", "ssim", "uciqe", "uiqm", "uicm", "uism", "uiconm")
    ]
    writer.writerow([set_name, "mean"] + means)


def cmd_evaluate(args: argparse.Namespace) -> int:
    reference = None if args.reference in (None, "none") else args.reference
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(METRIC_COLUMNS)
        if args.raw is not None:
            _metric_rows("raw", args.raw, reference, writer)
        _metric_rows("enhanced", args.enhanced, reference, writer)
    finally:
        if args.output:
            out.close()
    return 0


def cmd_degrade(args: argparse.Namespace) -> int:
    from .data import load_image, synth_degrade

    config = _load_config(args.config)
    clean = {
        path.stem: load_image(path) for path in _png_inputs(Path(args.clean))
    }
    dataset = synth_degrade(clean, args.output, config.synthesis)
    print(
        f"wrote {len(dataset)} pairs under {dataset.root} "
        f"(manifest: {dataset.root / 'manifest.csv'})"
    )
    return 0


def cmd_complexity(args: argparse.Namespace) -> int:
    from .complexity import count_complexity, format_table

    config = _load_config(args.config)
    reports = count_complexity(config.unet, config.phys)
    print(format_table(reports))
    small = reports["ambient"].params + reports["transmission"].params
    print(
        f"note: ambient+transmission nets total {small:,} parameters — exact "
        "analytic counts of the configured layer lists. This is orders of "
        "magnitude below the ~46.14K sometimes quoted for these estimators; "
        "the layer lists as configured cannot reproduce that figure."
    )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_image, resize
    from .sampler import SamplerError, benchmark_steps

    device = _device()
    bundle, _ = load_checkpoint(args.ckpt, device=device)
    resolution = bundle.unet_config.input_resolution
    timesteps = bundle.schedule.timesteps
    try:
        steps_list = [int(s) for s in args.steps_list.split(",") if s]
    except ValueError as exc:
        raise SamplerError(f"bad --steps-list: {exc}") from exc
    img = load_image(args.input)
    if img.shape[:2] != (resolution, resolution):
        img = resize(img, resolution)
    results = benchmark_steps(img, bundle, steps_list, repeats=args.repeat, seed=args.seed)
    print("steps,mode,seconds")
    for steps, seconds in results.items():
        mode = "reference" if steps == timesteps else "implicit"
        print(f"{steps},{mode},{seconds:.4f}")
    if len(results) > 1:
        fastest = min(steps_list)
        slowest = max(steps_list)
        ratio = results[slowest] / results[fastest]
        print(f"ratio,time(S={slowest})/time(S={fastest}),{ratio:.2f}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aquadiff",
        description="Physics-guided diffusion enhancement for underwater images.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="run or resume the training loop")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance images with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--phi-time",
        choices=("destination", "source"),
        default="destination",
        help="noise level at which the physics estimate is evaluated",
    )
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score image directories")
    p.add_argument("--enhanced", required=True)
    p.add_argument("--reference", help="reference directory, or 'none'")
    p.add_argument("--raw", help="also score this directory of inputs")
    p.add_argument("--output", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("degrade", help="synthesize a degraded paired dataset")
    p.add_argument("--clean", required=True, help="directory of clean PNGs")
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="YAML with a 'synthesis' section")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("complexity", help="print FLOPs/parameter table")
    p.add_argument("--config", help="YAML run configuration")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("bench", help="wall-time comparison across step counts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="one PNG file")
    p.add_argument("--steps-list", default="25,1000")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def run(argv: list[str] | None = None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigFileError
    from .data import DatasetError
    from .metrics import MetricError
    from .networks import ConfigError
    from .physics import PhysicsError
    from .sampler import SamplerError
    from .schedule import ScheduleError
    from .training import TrainingDivergedError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else USAGE_ERROR
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    try:
        return args.func(args)
    except (
        CheckpointError,
        ConfigError,
        ConfigFileError,
        DatasetError,
        MetricError,
        PhysicsError,
        SamplerError,
        ScheduleError,
        TrainingDivergedError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def entry() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    entry()
