from __future__ import annotations

import argparse
import json
from pathlib import Path
from typing import Callable, Dict, List, Optional

from PIL import Image

from .artifacts import ArtifactManager, RunPaths
from .checkpoints import load_checkpoint, restore_model
from .colorspace import BinTable, LabImage, SoftEncoder, fit_rebalance_weights, lab_to_rgb, load_bins, rgb_to_lab
from .config import Settings, format_schema, load_settings, parse_overrides
from .datapipe import load_records, load_rgb, prepare_sample, sample_chroma, scan_dataset, upsample_chroma
from .errors import CheckpointError, ConfigError, DatasetError, TrainingDivergedError
from .evalkit import GrayColorizer, ModelColorizer, ReferenceColorizer, evaluate, format_report, load_lpips_plugin, summary_lines
from .logging_config import get_logger, log_section, setup_logging
from .trainer import TrainPlan, finetune, resume, resume_plan, seed_everything, train_end_to_end, train_progressive
from .tucan_net import NetworkConfig, build, format_plan_report
from .types import RunManifest, TrainScheme

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Flat section.key = value config file")
    common.add_argument(
        "--set",
        action="append",
        dest="overrides",
        default=[],
        metavar="KEY=VALUE",
        help="Override one config key, e.g. train.batch_size=8 (repeatable)",
    )
    common.add_argument("--seed", type=int, help="Seed for weights, shuffling and previews")
    common.add_argument("--out", type=Path, help="Directory that receives run folders")
    common.add_argument("--run-id", help="Optional run identifier override")
    return common


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="tucan", description="Capsule U-net image colourisation")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", parents=[common], help="Train a network from scratch")
    train.add_argument("--scheme", choices=[TrainScheme.END_TO_END.value, TrainScheme.PROGRESSIVE.value])
    train.add_argument("--data", type=Path, help="Dataset directory (overrides data.root)")
    train.add_argument("--resume", type=Path, help="Continue a run from this checkpoint")
    train.add_argument("--dry-run", action="store_true", help="Resolve the plan and write the manifest only")

    tune = commands.add_parser("finetune", parents=[common], help="Fine-tune a checkpoint with split learning rates")
    tune.add_argument("--checkpoint", type=Path)
    tune.add_argument("--data", type=Path, help="Dataset directory (overrides data.root)")

    colorize = commands.add_parser("colorize", parents=[common], help="Colourise image files")
    colorize.add_argument("inputs", nargs="+", type=Path)
    colorize.add_argument("--checkpoint", type=Path, required=True)
    colorize.add_argument("--suffix", default="_color", help="Appended to each output file stem")
    colorize.add_argument("--output-dir", type=Path, help="Write results here instead of next to the inputs")

    evaluate_cmd = commands.add_parser("evaluate", parents=[common], help="Score a model on a dataset")
    source = evaluate_cmd.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", type=Path)
    source.add_argument("--stub", choices=["perfect", "gray"], help="Evaluate a reference stub instead of a model")
    evaluate_cmd.add_argument("--data", type=Path, help="Dataset directory (overrides data.root)")
    evaluate_cmd.add_argument("--lpips-plugin", help="LPIPS scorer as package.module:attr")

    inspect = commands.add_parser("inspect", parents=[common], help="Show a shape plan, checkpoint or config schema")
    target = inspect.add_mutually_exclusive_group()
    target.add_argument("--checkpoint", type=Path)
    target.add_argument("--schema", action="store_true", help="List every config key")

    bins = commands.add_parser("bins", parents=[common], help="Fit re-balancing weights and write a bin table")
    bins.add_argument("--data", type=Path, help="Dataset directory (overrides data.root)")
    bins.add_argument("--output", type=Path, help="Bin table path (default: <run>/bins.txt)")

    return parser.parse_args(argv)


def build_settings(args: argparse.Namespace) -> Settings:
    overrides: Dict[str, str] = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.out:
        overrides["output.dir"] = str(args.out.expanduser().resolve())
    if getattr(args, "scheme", None):
        overrides["train.scheme"] = args.scheme
    if getattr(args, "data", None):
        overrides["data.root"] = str(args.data.expanduser().resolve())
    return load_settings(args.config, overrides=overrides)


def _data_root(settings: Settings) -> Path:
    if settings.data.root is None:
        raise ConfigError("data.root is not set (use --data or TUCAN_DATA_ROOT)", key="data.root")
    return settings.data.root


def _start_run(settings: Settings, args: argparse.Namespace) -> tuple[ArtifactManager, RunPaths]:
    artifact_manager = ArtifactManager(settings.output.dir)
    run_paths = artifact_manager.create_run(run_id=args.run_id)
    log_file = run_paths.logs_dir / "run.log"
    setup_logging(log_file_path=log_file)
    artifact_manager.persist_config(run_paths, args.config)
    log_section(logger, f"tucan {args.command}", {"run_id": run_paths.run_id, "log_file": log_file})
    return artifact_manager, run_paths


def _print_summary(summary: Dict[str, object]) -> None:
    logger.info("Run summary: %s", json.dumps(summary, indent=2))
    logger.progress("\n%s", json.dumps(summary, indent=2))  # type: ignore[attr-defined]


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    checkpoint = load_checkpoint(args.resume) if args.resume else None
    if checkpoint is not None:
        plan = resume_plan(checkpoint, settings.train)
    else:
        plan = TrainPlan.from_settings(settings.train)
        if plan.scheme == TrainScheme.FINETUNE:
            raise ConfigError("Use the finetune command for train.scheme=finetune", key="train.scheme")
    bins = checkpoint.bins if checkpoint else load_bins(settings.quantization.bins_file, settings.quantization.grid_size)
    network = (
        checkpoint.network_config if checkpoint else NetworkConfig.from_settings(settings.network, bins.Q).validate()
    )
    root = None if args.dry_run else _data_root(settings)

    artifact_manager, run_paths = _start_run(settings, args)
    if args.dry_run:
        manifest = RunManifest(
            run_id=run_paths.run_id,
            plan=plan.to_dict(),
            config_fingerprint=network.fingerprint(),
            bins_fingerprint=bins.fingerprint(),
            total_epochs=plan.total_epochs,
        )
        artifact_manager.write_manifest(run_paths, manifest)
        _print_summary({"run_id": run_paths.run_id, "plan": plan.to_dict(), "manifest": str(run_paths.manifest_path)})
        return EXIT_OK

    assert root is not None
    q = settings.quantization
    paths = scan_dataset(root, settings.data.split_manifest, settings.data.limit)
    if not bins.fitted:
        bins = fit_rebalance_weights(
            sample_chroma(paths[: q.prior_samples], network.plan.input_size), bins, q.rebalance_lambda, q.prior_sigma
        )
        bins.save(artifact_manager.bins_path(run_paths))
    records = load_records(
        paths, SoftEncoder(bins, q.neighbors, q.sigma), network.plan.input_size, cache=settings.data.cache
    )

    seed_everything(plan.seed)
    if checkpoint is not None:
        stream = resume(checkpoint, records, plan, artifact_manager, run_paths)
    elif plan.scheme == TrainScheme.PROGRESSIVE:
        stream = train_progressive(build(network, bins), bins, records, plan, artifact_manager, run_paths)
    else:
        stream = train_end_to_end(build(network, bins), bins, records, plan, artifact_manager, run_paths)
    return _drain(stream, run_paths, plan)


def cmd_finetune(args: argparse.Namespace, settings: Settings) -> int:
    if args.checkpoint is None:
        raise CheckpointError("finetune needs --checkpoint")
    checkpoint = load_checkpoint(args.checkpoint)
    plan = TrainPlan.from_settings(settings.train, scheme=TrainScheme.FINETUNE.value)
    root = _data_root(settings)
    artifact_manager, run_paths = _start_run(settings, args)
    q = settings.quantization
    paths = scan_dataset(root, settings.data.split_manifest, settings.data.limit)
    records = load_records(
        paths,
        SoftEncoder(checkpoint.bins, q.neighbors, q.sigma),
        checkpoint.network_config.plan.input_size,
        cache=settings.data.cache,
    )
    seed_everything(plan.seed)
    return _drain(finetune(checkpoint, records, plan, artifact_manager, run_paths), run_paths, plan)


def _drain(stream, run_paths: RunPaths, plan: TrainPlan) -> int:
    last = None
    for checkpoint in stream:
        last = checkpoint
    _print_summary({
        "run_id": run_paths.run_id,
        "scheme": plan.scheme.value,
        "total_epochs": plan.total_epochs,
        "last_checkpoint": str(last.path) if last else None,
        "output_dir": str(run_paths.base_dir),
    })
    return EXIT_OK


def cmd_colorize(args: argparse.Namespace, settings: Settings) -> int:
    seed_everything(settings.train.seed)
    checkpoint = load_checkpoint(args.checkpoint)
    colorizer = ModelColorizer(restore_model(checkpoint), name=str(args.checkpoint), device=settings.train.device)
    encoder = SoftEncoder(checkpoint.bins)
    size = checkpoint.network_config.plan.input_size
    for path in args.inputs:
        rgb, _ = load_rgb(path)
        height, width = rgb.shape[:2]
        record = prepare_sample(rgb, encoder, size, source=path)
        ab = upsample_chroma(colorizer.colorize(record), height, width)
        result = lab_to_rgb(LabImage(L=rgb_to_lab(rgb).L, ab=ab))
        out_dir = args.output_dir or path.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / f"{path.stem}{args.suffix}.png"
        Image.fromarray(result).save(target)
        logger.progress("%s -> %s", path, target)  # type: ignore[attr-defined]
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, settings: Settings) -> int:
    seed_everything(settings.train.seed)
    plugin = load_lpips_plugin(args.lpips_plugin) if args.lpips_plugin else None
    if args.checkpoint is not None:
        checkpoint = load_checkpoint(args.checkpoint)
        bins = checkpoint.bins
        size = checkpoint.network_config.plan.input_size
        colorizer = ModelColorizer(restore_model(checkpoint), name=str(args.checkpoint), device=settings.train.device)
    else:
        bins = load_bins(settings.quantization.bins_file, settings.quantization.grid_size)
        size = NetworkConfig.from_settings(settings.network, bins.Q).plan.input_size
        colorizer = ReferenceColorizer() if args.stub == "perfect" else GrayColorizer()
    root = _data_root(settings)

    artifact_manager, run_paths = _start_run(settings, args)
    paths = scan_dataset(root, settings.data.split_manifest, settings.data.limit)
    records = load_records(paths, SoftEncoder(bins), size, cache=settings.data.cache)
    report = evaluate(colorizer, records, dataset_id=str(root), plugin=plugin, plugin_name=args.lpips_plugin)
    report_path = artifact_manager.write_report(run_paths, format_report(report))
    for line in summary_lines(report):
        logger.progress("%s", line)  # type: ignore[attr-defined]
    logger.progress("Report: %s", report_path)  # type: ignore[attr-defined]
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, settings: Settings) -> int:
    if args.schema:
        logger.progress("%s", format_schema())  # type: ignore[attr-defined]
        return EXIT_OK
    if args.checkpoint is not None:
        checkpoint = load_checkpoint(args.checkpoint)
        logger.progress("%s", json.dumps(checkpoint.describe(), indent=2))  # type: ignore[attr-defined]
        logger.progress("%s", format_plan_report(checkpoint.network_config))  # type: ignore[attr-defined]
        return EXIT_OK
    bins = load_bins(settings.quantization.bins_file, settings.quantization.grid_size)
    network = NetworkConfig.from_settings(settings.network, bins.Q)
    logger.progress("%s", format_plan_report(network))  # type: ignore[attr-defined]
    return EXIT_OK


def cmd_bins(args: argparse.Namespace, settings: Settings) -> int:
    q = settings.quantization
    bins: BinTable = load_bins(q.bins_file, q.grid_size)
    size = NetworkConfig.from_settings(settings.network, bins.Q).plan.input_size
    root = _data_root(settings)
    artifact_manager, run_paths = _start_run(settings, args)
    limit = min(settings.data.limit or q.prior_samples, q.prior_samples)
    paths = scan_dataset(root, settings.data.split_manifest, limit)
    fitted = fit_rebalance_weights(sample_chroma(paths, size), bins, q.rebalance_lambda, q.prior_sigma)
    target = fitted.save(args.output or artifact_manager.bins_path(run_paths))
    _print_summary({"bins": str(target), "Q": fitted.Q, "images": len(paths)})
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, Settings], int]] = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "colorize": cmd_colorize,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
    "bins": cmd_bins,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    setup_logging(log_file_path=None)
    try:
        settings = build_settings(args)
        return COMMANDS[args.command](args, settings)
    except ConfigError as error:
        key = f" [{error.key}]" if error.key else ""
        logger.error("Config error%s: %s", key, error)
        logger.progress("X Config error%s: %s", key, error)  # type: ignore[attr-defined]
        return EXIT_CONFIG
    except (CheckpointError, DatasetError, OSError) as error:
        logger.error("Artifact error: %s", error)
        logger.progress("X %s", error)  # type: ignore[attr-defined]
        return EXIT_ARTIFACT
    except TrainingDivergedError as error:
        logger.error("Training diverged: %s (diagnostic checkpoint: %s)", error, error.checkpoint_path)
        logger.progress("X Training diverged, diagnostic checkpoint: %s", error.checkpoint_path)  # type: ignore[attr-defined]
        return EXIT_FAILED


def run() -> None:
    code = main()
    if code:
        raise SystemExit(code)


if __name__ == "__main__":  # pragma: no cover - CLI entry point
    run()
