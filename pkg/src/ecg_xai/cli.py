"""CLI for the ECG explainability pipeline."""

import argparse
import asyncio
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import pandas as pd

from ecg_xai import (
    EcgError,
    EcgInvalidInputError,
    ExperimentConfig,
    apply_overrides,
    load_experiment_config,
)

from .const import (
    CONFUSION_CSV,
    DEFAULT_LEAD,
    DEFAULT_POWERLINE_HZ,
    HEATMAP_CSV,
    HEATMAP_DIR,
    HISTOGRAM_CSV,
    HISTORY_CSV,
    LABELS,
    LEADS,
    METRICS_PATIENT_CSV,
    METRICS_SEGMENT_CSV,
    POWERLINE_CHOICES,
    SEGMENT_CACHE,
)
from .dataset import (
    ingest,
    label_counts,
    load_segment_cache,
    save_segment_cache,
    select_patients,
)
from .explain import (
    ExplainConfig,
    average_all,
    explain_segments,
    export_averaged_maps,
    load_averaged_maps,
)
from .harness import run_experiment, summarize_runs
from .metrics import confusion_frame, patient_level_metrics, segment_level_metrics
from .models import LengthHistogram, RrrSegment
from .networks import ARCHITECTURES, TrainedModel, load_checkpoint
from .plotting import plot_averaged_map, plot_history, plot_length_histogram
from .preprocessing import length_histogram, process_recordings
from .synthetic import generate_synthetic, recordings_frame
from .training import predict_proba
from .utils import atomic_write, parse_cli_params

logging.basicConfig(level=logging.INFO, format="%(message)s")
_LOGGER = logging.getLogger(__name__)


def _write_frame(frame: pd.DataFrame, path: Path) -> None:
    with atomic_write(path) as file:
        frame.to_csv(file, index=False, float_format="%.9g")


def build_experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file, then explicit flags, then --set overrides.

    Args:
        args: Parsed command line arguments.

    Returns:
        The resulting experiment config.
    """
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    flag_keys = {
        "arch": "architecture",
        "normalize": "normalization",
        "iterations": "n_iterations",
        "seed": "seed",
        "manifest": "manifest",
        "cache": "segment_cache",
        "patients": "synthetic_patients",
    }
    for flag, key in flag_keys.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value) if isinstance(value, Path) else value
    if getattr(args, "mask_padding", False):
        overrides["vit.mask_padding"] = True
    try:
        overrides.update(parse_cli_params(args.set or []))
    except ValueError as err:
        raise EcgInvalidInputError(str(err), error_id="config") from None
    return apply_overrides(config, overrides)


def _split_segments(
    model: TrainedModel, cache: Path | None, part: str
) -> list[RrrSegment]:
    """Segments of one split part of the run a checkpoint was trained in."""
    cache_path = cache or (Path(model.segment_cache) if model.segment_cache else None)
    if cache_path is None:
        raise EcgInvalidInputError(
            "Checkpoint names no segment cache; pass --cache.", error_id="cache"
        )
    segments, metadata = load_segment_cache(cache_path)
    normalization = metadata.get("normalization", model.normalization)
    if normalization != model.normalization:
        raise EcgInvalidInputError(
            f"Cache {cache_path} uses normalization '{normalization}', the model "
            f"was trained on '{model.normalization}'.",
            error_id="cache",
        )
    if part == "all":
        return segments
    patients = model.split.get(part)
    if not patients:
        raise EcgInvalidInputError(
            f"Checkpoint records no '{part}' patients; use --split all.",
            error_id="split",
        )
    return select_patients(segments, patients)


async def cmd_ingest(args: argparse.Namespace) -> None:
    """Handle ingest command.

    Validates a manifest and reports patients per label.

    Args:
        args: Parsed command line arguments including manifest and lead.
    """
    recordings = ingest(args.manifest, lead=args.lead, strict=not args.lenient)
    counts = label_counts(recordings)
    print(f"Ingested {len(recordings)} recordings:")
    for label in LABELS:
        print(f"- {label:<5}: {counts.get(label, 0)} patients")


async def cmd_preprocess(args: argparse.Namespace) -> None:
    """Handle preprocess command.

    Cleans, segments and caches all recordings of a manifest and writes the
    segment length histogram.

    Args:
        args: Parsed command line arguments.
    """
    recordings = ingest(args.manifest, lead=args.lead, strict=not args.lenient)
    segments, summary = process_recordings(recordings, args.normalize, args.powerline)
    out = Path(args.out)
    save_segment_cache(
        segments,
        out / SEGMENT_CACHE,
        {
            "normalization": args.normalize,
            "powerline_hz": args.powerline,
            "lead": args.lead,
        },
    )
    _write_frame(length_histogram(segments).to_frame(), out / HISTOGRAM_CSV)
    print(f"Wrote {len(segments)} segments to {out / SEGMENT_CACHE}")
    for label in LABELS:
        print(
            f"- {label:<5}: {len(summary.patients.get(label, ()))} patients, "
            f"{summary.segments.get(label, 0)} segments"
        )


async def cmd_synth(args: argparse.Namespace) -> None:
    """Handle synth command: write a synthetic wide-format manifest."""
    config = build_experiment_config(args)
    recordings = generate_synthetic(config.synthetic, args.patients, args.seed)
    path = Path(args.out) / "manifest.csv"
    _write_frame(recordings_frame(recordings), path)
    print(f"Wrote {len(recordings)} synthetic recordings to {path}")


async def cmd_train(args: argparse.Namespace) -> None:
    """Handle train command.

    Runs the full split/train/evaluate/explain protocol.

    Args:
        args: Parsed command line arguments.
    """
    config = build_experiment_config(args)
    out = Path(args.out) if args.out else Path("runs") / (
        f"{config.architecture}-{config.normalization}-{config.config_hash[:8]}"
    )
    result = await run_experiment(config, out, jobs=args.jobs)
    for level in ("segment", "patient"):
        mean, std = result.overall_accuracy(level)
        print(f"{level.capitalize()} accuracy: {mean:.4f} +- {std:.4f}")
    print(f"Run directory: {out}")


async def cmd_eval(args: argparse.Namespace) -> None:
    """Handle eval command: score a checkpoint on one split part."""
    model = load_checkpoint(args.checkpoint)
    segments = _split_segments(model, args.cache, args.split)
    probabilities = predict_proba(model, segments)
    segment_report = segment_level_metrics(segments, probabilities)
    patient_report = patient_level_metrics(segments, probabilities)

    out = Path(args.out)
    _write_frame(segment_report.to_frame(), out / METRICS_SEGMENT_CSV)
    _write_frame(patient_report.to_frame(), out / METRICS_PATIENT_CSV)
    confusion = [confusion_frame(segment_report), confusion_frame(patient_report)]
    _write_frame(pd.concat(confusion, ignore_index=True), out / CONFUSION_CSV)
    print(f"Segment accuracy: {segment_report.overall_accuracy:.4f}")
    print(f"Patient accuracy: {patient_report.overall_accuracy:.4f}")


async def cmd_explain(args: argparse.Namespace) -> None:
    """Handle explain command.

    Averages importance maps per label over one split part and writes the
    CSV and one figure per map.

    Args:
        args: Parsed command line arguments.
    """
    model = load_checkpoint(args.checkpoint)
    segments = _split_segments(model, args.cache, args.split)
    labels = args.label or list(LABELS)
    segments = [segment for segment in segments if segment.label in labels]
    if args.correct_only:
        predicates = ("correct",)
    elif args.misclassified:
        predicates = ("misclassified",)
    else:
        predicates = ("correct", "misclassified")

    config = ExplainConfig(
        layer=args.layer, head_reduction=args.head_reduction, batch_size=args.batch_size
    )
    bundles = explain_segments(model, segments, config)
    maps = average_all(bundles, labels, predicates)
    out = Path(args.out)
    export_averaged_maps(maps, out / HEATMAP_CSV)
    for averaged in maps:
        name = f"{averaged.label}_{averaged.predicate}_{averaged.source.name}.svg"
        plot_averaged_map(averaged, out / name)
    print(f"Wrote {len(maps)} averaged maps from {len(segments)} segments to {out}")


async def cmd_plot(args: argparse.Namespace) -> None:
    """Handle plot command: figures for everything in a run directory."""
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "figures"
    written = []
    if (run / HISTOGRAM_CSV).is_file():
        histogram = LengthHistogram.from_frame(pd.read_csv(run / HISTOGRAM_CSV))
        written.append(plot_length_histogram(histogram, out / "length_histogram.svg"))
    for iteration_dir in sorted(run.glob("iteration_*")):
        if (iteration_dir / HISTORY_CSV).is_file():
            history = pd.read_csv(iteration_dir / HISTORY_CSV)
            written.append(
                plot_history(history, out / f"{iteration_dir.name}_history.svg")
            )
        heatmaps = iteration_dir / HEATMAP_DIR / HEATMAP_CSV
        if heatmaps.is_file():
            for averaged in load_averaged_maps(heatmaps):
                name = (
                    f"{iteration_dir.name}_{averaged.label}_{averaged.predicate}_"
                    f"{averaged.source.name}.svg"
                )
                written.append(plot_averaged_map(averaged, out / name))
    if not written:
        raise EcgInvalidInputError(f"Nothing to plot in {run}.", error_id="plot")
    print(f"Wrote {len(written)} figures to {out}")


async def cmd_report(args: argparse.Namespace) -> None:
    """Handle report command: compare finished runs."""
    accuracy, per_label = summarize_runs([Path(run) for run in args.runs])
    out = Path(args.out)
    _write_frame(accuracy, out / "accuracy.csv")
    _write_frame(per_label, out / "per_label.csv")
    for row in accuracy.to_dict(orient="records"):
        mask = " masked" if row["mask_padding"] else ""
        print(
            f"{row['architecture']}{mask} ({row['normalization']}): "
            f"segment {row['segment_accuracy_mean']:.4f} "
            f"+- {row['segment_accuracy_std']:.4f}, "
            f"patient {row['patient_accuracy_mean']:.4f} "
            f"+- {row['patient_accuracy_std']:.4f} "
            f"over {row['iterations']} iterations"
        )


def build_parser() -> argparse.ArgumentParser:  # noqa: PLR0915
    """Argument parser with one subparser per command."""
    # Parent parser for common arguments
    common_parser = argparse.ArgumentParser(add_help=False)
    common_parser.add_argument(
        "-v", "--verbose", action="store_true", help="Log debug detail"
    )

    # Parent parser for experiment configuration
    config_parser = argparse.ArgumentParser(add_help=False)
    config_parser.add_argument("--config", type=Path, help="TOML or JSON config file")
    config_parser.add_argument(
        "--set",
        nargs="*",
        metavar="KEY=VALUE",
        help="Config overrides (e.g. training.epochs=5)",
    )

    manifest_parser = argparse.ArgumentParser(add_help=False)
    manifest_parser.add_argument(
        "--manifest", type=Path, required=True, help="Recording manifest CSV"
    )
    manifest_parser.add_argument(
        "--lead", default=DEFAULT_LEAD, choices=LEADS, help="Lead to keep"
    )
    manifest_parser.add_argument(
        "--lenient", action="store_true", help="Skip invalid rows instead of failing"
    )

    checkpoint_parser = argparse.ArgumentParser(add_help=False)
    checkpoint_parser.add_argument(
        "--checkpoint", type=Path, required=True, help="Checkpoint directory"
    )
    checkpoint_parser.add_argument(
        "--cache", type=Path, help="Segment cache (default: the one of the run)"
    )
    checkpoint_parser.add_argument(
        "--split",
        default="test",
        choices=["train", "val", "test", "all"],
        help="Split part to use",
    )
    checkpoint_parser.add_argument("--out", type=Path, required=True, help="Output dir")

    parser = argparse.ArgumentParser(
        prog="ecg-xai", description="Explainable single-lead ECG classification"
    )
    subparsers = parser.add_subparsers(dest="command")

    # Ingest
    subparsers.add_parser(
        "ingest",
        help="Validate a manifest and count patients",
        parents=[common_parser, manifest_parser],
    )

    # Preprocess
    parser_preprocess = subparsers.add_parser(
        "preprocess",
        help="Clean, segment and cache recordings",
        parents=[common_parser, manifest_parser],
    )
    parser_preprocess.add_argument(
        "--normalize", default="none", choices=["none", "zscore"]
    )
    parser_preprocess.add_argument(
        "--powerline",
        type=int,
        default=DEFAULT_POWERLINE_HZ,
        choices=POWERLINE_CHOICES,
        help="Mains frequency in Hz",
    )
    parser_preprocess.add_argument("--out", type=Path, required=True)

    # Synthetic data
    parser_synth = subparsers.add_parser(
        "synth",
        help="Write a synthetic recording manifest",
        parents=[common_parser, config_parser],
    )
    parser_synth.add_argument("--patients", type=int, default=30, help="Per class")
    parser_synth.add_argument("--seed", type=int, default=0)
    parser_synth.add_argument("--out", type=Path, required=True)

    # Train
    parser_train = subparsers.add_parser(
        "train",
        help="Run the split/train/evaluate/explain protocol",
        parents=[common_parser, config_parser],
    )
    parser_train.add_argument("--arch", choices=ARCHITECTURES)
    parser_train.add_argument("--normalize", choices=["none", "zscore"])
    parser_train.add_argument(
        "--mask-padding", action="store_true", help="Mask padded ViT patches"
    )
    parser_train.add_argument("--iterations", type=int, help="Number of iterations")
    parser_train.add_argument("--seed", type=int, help="Master seed")
    source = parser_train.add_mutually_exclusive_group()
    source.add_argument("--manifest", type=Path, help="Recording manifest CSV")
    source.add_argument("--cache", type=Path, help="Preprocessed segment cache")
    parser_train.add_argument(
        "--jobs", type=int, default=1, help="Iterations run in parallel"
    )
    parser_train.add_argument("--out", type=Path, help="Run directory")

    # Eval
    subparsers.add_parser(
        "eval",
        help="Score a checkpoint",
        parents=[common_parser, checkpoint_parser],
    )

    # Explain
    parser_explain = subparsers.add_parser(
        "explain",
        help="Average importance maps per label",
        parents=[common_parser, checkpoint_parser],
    )
    parser_explain.add_argument(
        "--label", action="append", choices=LABELS, help="Label(s) to explain"
    )
    predicate = parser_explain.add_mutually_exclusive_group()
    predicate.add_argument("--correct-only", action="store_true")
    predicate.add_argument("--misclassified", action="store_true")
    parser_explain.add_argument(
        "--layer",
        type=lambda value: value if value == "all" else int(value),
        help="Attention layer index or 'all' (default: last)",
    )
    parser_explain.add_argument(
        "--head-reduction", default="none", choices=["none", "mean"]
    )
    parser_explain.add_argument("--batch-size", type=int, default=64)

    # Plot
    parser_plot = subparsers.add_parser(
        "plot", help="Render run figures as SVG", parents=[common_parser]
    )
    parser_plot.add_argument("--run", type=Path, required=True, help="Run directory")
    parser_plot.add_argument("--out", type=Path, help="Figure directory")

    # Report
    parser_report = subparsers.add_parser(
        "report", help="Compare finished runs", parents=[common_parser]
    )
    parser_report.add_argument("runs", nargs="+", help="Run directories")
    parser_report.add_argument("--out", type=Path, required=True)

    return parser


async def async_main(argv: Sequence[str] | None = None) -> int:
    """Main CLI entrypoint."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    return await _dispatch_command(args)


async def _dispatch_command(args: argparse.Namespace) -> int:
    """Dispatch command to appropriate handler."""
    handlers = {
        "ingest": cmd_ingest,
        "preprocess": cmd_preprocess,
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "explain": cmd_explain,
        "plot": cmd_plot,
        "report": cmd_report,
    }

    try:
        await handlers[args.command](args)
    except EcgError as err:
        message = " ".join(str(err).split())
        print(f"error[{err.error_id}]: {message}", file=sys.stderr)
        return 1
    return 0


def cli_run(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return its exit code (0 ok, 1 failure, 2 usage)."""
    try:
        return asyncio.run(async_main(argv))
    except SystemExit as exit_:
        if exit_.code is None:
            return 0
        return exit_.code if isinstance(exit_.code, int) else 1


def main() -> None:
    """Entry point for console_scripts."""
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
