#!/usr/bin/env python3
"""
Segmentation kit command line.

Subcommands: gen-data, train, eval, boundary, flops, bench, ablate.
Every subcommand but eval starts from a preset (`--preset`, default micro),
applies an optional config file (`--config`) and then `--set key=value`
overrides; eval uses the configuration stored in the checkpoint.

Run: python -m src.cli <subcommand> [options]
"""

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Optional

# Add project root to path for imports
ROOT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT_DIR))

from src.bench import DEFAULT_RUNS, DEFAULT_WARMUP, bench_latency
from src.boundary import boundary_labels, downsample_labels, validate_labels
from src.config import BoundaryMode, RunConfig, load_run_config
from src.dataset import MANIFEST, load_dataset
from src.errors import ConfigError, KitError
from src.flops import count_flops
from src.metrics import MetricsReport
from src.model import build_model, count_params, load_checkpoint
from src.report_generator import FORMATS, emit_report, write_ablation_csv, write_json
from src.synthetic import gen_synthetic
from src.t4_format import read_t4, write_t4
from src.trainer import evaluate, fit
from src.utils import format_count, setup_logging

logger = logging.getLogger(__name__)

DATA_DIR = ROOT_DIR / "data"
ABLATIONS_FILE = DATA_DIR / "ablations.json"
DEFAULT_PRESET = "micro"
RUNS_DIR = Path("runs")


def load_ablations() -> dict:
    """Load the ablation sweep registry."""
    with open(ABLATIONS_FILE, "r", encoding="utf-8") as f:
        return json.load(f)["sweeps"]


def _banner(title: str):
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


def parse_size(text: str) -> tuple[int, int]:
    """'64' or '64x128' -> (h, w)."""
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"size {text!r} must look like 64 or 64x128") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise ConfigError(f"size {text!r} must look like 64 or 64x128")
    return dims[0], dims[1]


def _load_config(args, extra: Optional[list[str]] = None) -> RunConfig:
    overrides = list(args.set) + (extra or [])
    return load_run_config(path=args.config, preset=args.preset, overrides=overrides)


def _config_echo(run: RunConfig) -> dict:
    return dict(line.split(" = ", 1) for line in run.to_text().splitlines())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    extra = []
    if args.seed is not None:
        extra.append(f"synth.seed={args.seed}")
    if args.samples is not None:
        extra.append(f"synth.num_samples={args.samples}")
    if args.classes is not None:
        extra.append(f"synth.num_classes={args.classes}")
    if args.size is not None:
        h, w = parse_size(args.size)
        extra += [f"synth.height={h}", f"synth.width={w}"]
    run = _load_config(args, extra)
    _banner("Generating synthetic dataset")
    index = gen_synthetic(run.synth, args.out)
    logger.info(f"DONE: {len(index)} samples in {args.out}")
    return 0


def cmd_train(args) -> int:
    extra = []
    if args.epochs is not None:
        extra.append(f"train.epochs={args.epochs}")
    if args.max_steps is not None:
        extra.append(f"train.max_steps={args.max_steps}")
    if args.seed is not None:
        extra.append(f"train.seed={args.seed}")
    run = _load_config(args, extra)
    _banner("Training")

    logger.info("-" * 40)
    logger.info("Phase 1: Loading dataset...")
    dataset = load_dataset(args.data)
    if dataset.channels != run.model.encoder.in_channels:
        raise ConfigError(
            f"dataset has {dataset.channels} channels, encoder.in_channels is {run.model.encoder.in_channels}"
        )

    logger.info("-" * 40)
    logger.info("Phase 2: Building model...")
    model = build_model(run.model, seed=run.train.seed)

    logger.info("-" * 40)
    logger.info("Phase 3: Fitting...")
    result = fit(model, dataset, run, args.out)

    _banner(f"TRAIN COMPLETE: {result.steps} steps, log {result.log_path}, checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    _banner("Evaluating")
    model, run = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset, run, split=args.split)

    image, _ = dataset.load_sample(dataset.split(args.split)[0])
    cost = count_flops(run.model, (1, *image.shape))
    report.macs, report.flops, report.elementwise_ops = cost.macs, cost.flops, cost.elementwise
    report.config = _config_echo(run)

    out = Path(args.out)
    for fmt in args.format:
        emit_report(report, fmt, out / f"report.{fmt}")
    print(f"mIoU {report.miou:.6f}")
    return 0


def cmd_boundary(args) -> int:
    run = _load_config(args)
    if args.mode is not None:
        run.boundary.mode = BoundaryMode(args.mode)
        run.boundary.validate()
    _banner(f"Extracting boundaries (epsilon {run.boundary.epsilon}, mode {run.boundary.mode.value})")

    src = Path(args.labels)
    if src.is_dir():
        dataset = load_dataset(src)
        items = [(sid, dataset.label_path(sid)) for sid in dataset.ids]
    else:
        items = [(src.stem, src)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    for sid, path in items:
        labels = read_t4(path)
        report = validate_labels(labels, run.boundary.num_classes)
        if not report.valid:
            raise ConfigError(
                f"{path}: label ids {report.out_of_range} exceed model.num_classes={run.boundary.num_classes}"
            )
        edges = boundary_labels(downsample_labels(labels, args.factor, center=True), run.boundary)
        write_t4(out / f"{sid}.t4", edges)
        total += int(((edges != 0) & (edges != 255)).sum())
    logger.info(f"DONE: {len(items)} boundary maps, {total} boundary pixels, in {out}")
    return 0


def _input_dims(args, run: RunConfig) -> tuple[int, int, int, int]:
    if args.size is not None:
        h, w = parse_size(args.size)
    else:
        h, w = run.train.augmentation.crop_h, run.train.augmentation.crop_w
    return args.batch, run.model.encoder.in_channels, h, w


def cmd_flops(args) -> int:
    run = _load_config(args)
    dims = _input_dims(args, run)
    _banner(f"Counting operations for input {dims}")
    report = count_flops(run.model, dims, fold_bn=not args.unfolded)
    logger.info(
        f"Flops: {format_count(report.macs)} MACs, {format_count(report.flops)} FLOPs, "
        f"{format_count(report.elementwise)} elementwise ops over {len(report.layers)} layers"
    )
    if args.out:
        write_json({"dims": list(dims), "folded": not args.unfolded, **report.to_dict()}, args.out)
    print(f"MACs {report.macs} FLOPs {report.flops}")
    return 0


def cmd_bench(args) -> int:
    run = _load_config(args)
    if args.checkpoint:
        model, run = load_checkpoint(args.checkpoint)
    else:
        model = build_model(run.model, seed=run.train.seed)
    dims = _input_dims(args, run)
    if not args.no_fold:
        model = model.fold()
    _banner(f"Benchmarking {args.runs} runs on {dims} ({'folded' if not args.no_fold else 'unfolded'})")
    stats = bench_latency(model, dims, runs=args.runs, warmup=args.warmup, threads=args.threads)

    cost = count_flops(run.model, dims, fold_bn=not args.no_fold)
    report = MetricsReport(
        macs=cost.macs, flops=cost.flops, elementwise_ops=cost.elementwise,
        params=count_params(model), latency=stats, config=_config_echo(run),
    )
    out = Path(args.out)
    write_json({"dims": list(dims), "folded": not args.no_fold, **report.to_dict()}, out / "bench.json")
    emit_report(report, "svg", out / "bench.svg")
    print(f"mean {stats.mean_ms:.3f} ms  median {stats.median_ms:.3f} ms  p95 {stats.p95_ms:.3f} ms  {stats.fps:.2f} FPS")
    return 0


def fit_input_size(run: RunConfig):
    """Grow synthetic image and crop sizes to the nearest multiple the model accepts."""
    m = run.model.required_multiple

    def _up(n: int) -> int:
        return max(m, -(-n // m) * m)

    run.synth.height = _up(run.synth.height)
    run.synth.width = _up(run.synth.width)
    aug = run.train.augmentation
    aug.crop_h, aug.crop_w = run.synth.height, run.synth.width


def cmd_ablate(args) -> int:
    sweeps = load_ablations()
    if args.sweep not in sweeps:
        raise ConfigError(f"unknown sweep '{args.sweep}' (available: {', '.join(sweeps)})")
    sweep = sweeps[args.sweep]
    values = list(sweep["values"]) if args.values is None else [v.strip() for v in args.values.split(",") if v.strip()]
    unknown = [v for v in values if v not in sweep["values"]]
    if unknown:
        raise ConfigError(f"sweep '{args.sweep}' has no value(s) {unknown} (available: {', '.join(sweep['values'])})")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {args.seeds!r}") from None
    # sweep-wide settings sit under the command-line overrides
    settings = [f"{key}={raw}" for key, raw in sweep.get("settings", {}).items()]
    base = load_run_config(path=args.config, preset=args.preset, overrides=settings + list(args.set))
    out = Path(args.out)
    _banner(f"Ablation '{args.sweep}': {sweep['description']}")
    logger.info(f"Ablate: values {values}, seeds {seeds}")
    if settings:
        logger.info(f"Ablate: sweep settings {settings}")

    rows = []
    for value in values:
        run = copy.deepcopy(base)
        for key, raw in sweep["values"][value].items():
            run.set(key, raw)
        fit_input_size(run)
        run.validate()

        h, w = run.synth.height, run.synth.width
        data_dir = out / f"data_{h}x{w}"
        if (data_dir / MANIFEST).exists():
            dataset = load_dataset(data_dir)
        else:
            dataset = gen_synthetic(run.synth, data_dir)
        cost = count_flops(run.model, (1, run.model.encoder.in_channels, h, w))

        for seed in seeds:
            logger.info("-" * 40)
            logger.info(f"Ablate: {args.sweep}={value}, seed {seed}")
            run.train.seed = seed
            model = build_model(run.model, seed=seed)
            fit(model, dataset, run, out / value / f"seed_{seed}")
            report = evaluate(model, dataset, run, split=args.split)
            rows.append({
                "value": value,
                "seed": seed,
                "miou": report.miou,
                "params": report.params,
                "macs": cost.macs,
            })

    path = write_ablation_csv(rows, out / f"{args.sweep}.csv")
    _banner(f"ABLATION COMPLETE: {len(rows)} runs, table {path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    logging_opts = argparse.ArgumentParser(add_help=False)
    logging_opts.add_argument("--verbose", action="store_true", help="debug logging")
    common = argparse.ArgumentParser(add_help=False, parents=[logging_opts])
    common.add_argument("--preset", default=DEFAULT_PRESET, help="named preset from data/presets")
    common.add_argument("--config", default=None, help="key = value config file applied over the preset")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    parser = argparse.ArgumentParser(
        prog="python -m src.cli",
        description="Multi-scale fusion segmentation kit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def _add(name: str, handler, help_text: str, parents=None) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=parents or [common], help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(handler=handler)
        return p

    p = _add("gen-data", cmd_gen_data, "write a synthetic dataset")
    p.add_argument("--out", default=str(RUNS_DIR / "data"), help="dataset directory")
    p.add_argument("--seed", type=int, default=None, help="generator seed (synth.seed)")
    p.add_argument("--samples", type=int, default=None, help="number of samples (synth.num_samples)")
    p.add_argument("--size", default=None, help="image size, 64 or 64x128")
    p.add_argument("--classes", type=int, default=None, help="number of classes including background")

    p = _add("train", cmd_train, "train a model and write a checkpoint and step log")
    p.add_argument("--data", default=str(RUNS_DIR / "data"), help="dataset directory")
    p.add_argument("--out", default=str(RUNS_DIR / "train"), help="output directory")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (train.epochs)")
    p.add_argument("--max-steps", type=int, default=None, help="step cap (train.max_steps)")
    p.add_argument("--seed", type=int, default=None, help="training seed (train.seed)")

    # eval takes its configuration from the checkpoint
    p = _add("eval", cmd_eval, "score a checkpoint on a dataset split", parents=[logging_opts])
    p.add_argument("--checkpoint", default=str(RUNS_DIR / "train" / "checkpoint"), help="checkpoint directory")
    p.add_argument("--data", default=str(RUNS_DIR / "data"), help="dataset directory")
    p.add_argument("--split", default="val", help="train, val or all")
    p.add_argument("--format", nargs="+", choices=FORMATS, default=["json"], help="report formats")
    p.add_argument("--out", default=str(RUNS_DIR / "eval"), help="report directory")

    p = _add("boundary", cmd_boundary, "write boundary maps for label files")
    p.add_argument("--labels", required=True, help="a label .t4 file or a dataset directory")
    p.add_argument("--out", default=str(RUNS_DIR / "boundary"), help="output directory")
    p.add_argument("--mode", choices=["class", "zero-one"], default=None, help="boundary id mode")
    p.add_argument("--factor", type=int, default=1, help="downsample labels by this factor first")

    p = _add("flops", cmd_flops, "count MACs and FLOPs of one forward")
    p.add_argument("--size", default=None, help="input size, 1024 or 1024x2048; unset uses the crop size")
    p.add_argument("--batch", type=int, default=1, help="batch size")
    p.add_argument("--unfolded", action="store_true", help="count batch-norm ops")
    p.add_argument("--out", default=None, help="optional JSON report path")

    p = _add("bench", cmd_bench, "time eval-mode forwards")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory; unset builds a fresh model")
    p.add_argument("--size", default=None, help="input size; unset uses the crop size")
    p.add_argument("--batch", type=int, default=1, help="batch size")
    p.add_argument("--runs", type=int, default=DEFAULT_RUNS, help="timed forwards")
    p.add_argument("--warmup", type=int, default=DEFAULT_WARMUP, help="untimed forwards first")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads")
    p.add_argument("--no-fold", action="store_true", help="keep batch norm instead of folding it")
    p.add_argument("--out", default=str(RUNS_DIR / "bench"), help="report directory")

    p = _add("ablate", cmd_ablate, "run a sweep from data/ablations.json")
    p.add_argument("sweep", help="sweep name, e.g. pooling-count")
    p.add_argument("--values", default=None, help="comma-separated subset of sweep values")
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.add_argument("--split", default="val", help="split scored for each run")
    p.add_argument("--out", default=str(RUNS_DIR / "ablate"), help="output directory")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.verbose)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return 2
    except (KitError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
