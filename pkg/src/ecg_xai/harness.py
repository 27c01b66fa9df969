"""Experiment orchestration: repeated split, train, evaluate and explain.

An experiment runs ``n_iterations`` independent iterations on one segment
corpus. Every iteration draws a fresh patient-grouped split from its own
seed, trains a fresh network, scores the test part at segment and patient
level and averages importance maps per label. Results land in a run
directory::

    run.json                       config, seeds, version, status
    metrics_segment.csv            per-iteration, per-label metrics
    metrics_patient.csv
    metrics_summary.csv            mean/std over iterations
    confusion.csv
    history.csv
    length_histogram.csv
    segments.npz                   segment cache the run was trained on
    iteration_<i>/                 the same files for a single iteration
    checkpoints/iteration_<i>/     params.npz + manifest.json
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .const import (
    CHECKPOINT_DIR,
    CONFUSION_CSV,
    DEFAULT_LEAD,
    DEFAULT_POWERLINE_HZ,
    DEFAULT_SPLIT_RATIOS,
    HEATMAP_CSV,
    HEATMAP_DIR,
    HISTOGRAM_CSV,
    HISTORY_CSV,
    LABELS,
    METRICS_PATIENT_CSV,
    METRICS_SEGMENT_CSV,
    METRICS_SUMMARY_CSV,
    POWERLINE_CHOICES,
    RUN_MANIFEST,
    SEGMENT_CACHE,
    SPLIT_JSON,
)
from .dataset import group_shuffle_split, ingest, load_segment_cache, save_segment_cache
from .exceptions import EcgContractError, EcgExperimentError
from .explain import ExplainConfig, average_all, explain_segments, export_averaged_maps
from .metrics import (
    average_reports,
    confusion_frame,
    patient_level_metrics,
    segment_level_metrics,
)
from .models import AveragedMap, MetricsReport, Predicate, RrrSegment
from .networks import (
    ARCHITECTURES,
    CnnLstmConfig,
    NetworkConfig,
    ResNetConfig,
    TrainedModel,
    ViTConfig,
    save_checkpoint,
)
from .preprocessing import length_histogram, process_recordings
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainingConfig, TrainingHistory, predict_proba, train_model
from .utils import atomic_write, config_hash, version_string

_LOGGER = logging.getLogger(__name__)

# Seeds stay below 2**31 so seed + 1 is still a valid sklearn random_state.
_SEED_MODULUS = 2**31 - 1


def default_vit_layers(normalization: str) -> int:
    """ViT depth used when none is configured: 2 for z-normalized input, else 3."""
    return 2 if normalization == "zscore" else 3


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that defines an experiment.

    Attributes:
        architecture: 'vit', 'resnet' or 'cnn_lstm'.
        normalization: 'none' or 'zscore' (per recording, before cleaning).
        n_iterations: Independent split/train/evaluate iterations.
        seed: Master seed; iteration seeds derive from it.
        ratios: Train/validation/test fractions of patients.
        lead: Lead kept at ingestion.
        powerline_hz: Mains frequency removed by the notch filter.
        manifest: Recording manifest; synthetic data is generated when
            neither manifest nor segment_cache is set.
        segment_cache: Preprocessed segment cache to train from.
        synthetic_patients: Synthetic patients per class.
        shuffle_labels: Permute patient labels before splitting (control run).
        explain_predicates: Which averaged maps to export.
        vit: ViT hyperparameters; defaults to default_vit_layers() blocks.
        resnet: ResNet hyperparameters.
        cnn_lstm: CNN-LSTM hyperparameters.
        training: Optimization budget.
        explain: Importance map selection.
        synthetic: Synthetic corpus parameters.
    """

    architecture: str = "vit"
    normalization: str = "none"
    n_iterations: int = 5
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    lead: str = DEFAULT_LEAD
    powerline_hz: int = DEFAULT_POWERLINE_HZ
    manifest: str | None = None
    segment_cache: str | None = None
    synthetic_patients: int = 30
    shuffle_labels: bool = False
    explain_predicates: tuple[Predicate, ...] = ("correct", "misclassified")
    vit: ViTConfig | None = None
    resnet: ResNetConfig = field(default_factory=ResNetConfig)
    cnn_lstm: CnnLstmConfig = field(default_factory=CnnLstmConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self) -> None:
        """Normalize sequences and check option values."""
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(
            self, "explain_predicates", tuple(self.explain_predicates)
        )
        if self.vit is None:
            object.__setattr__(
                self, "vit", ViTConfig(n_layers=default_vit_layers(self.normalization))
            )
        if self.architecture not in ARCHITECTURES:
            raise EcgContractError(
                f"ExperimentConfig: unknown architecture '{self.architecture}', "
                f"expected one of {ARCHITECTURES}."
            )
        if self.normalization not in ("none", "zscore"):
            raise EcgContractError(
                f"ExperimentConfig: normalization must be 'none' or 'zscore', "
                f"got '{self.normalization}'."
            )
        if self.n_iterations < 1:
            raise EcgContractError(
                f"ExperimentConfig: n_iterations must be >= 1, "
                f"got {self.n_iterations}."
            )
        if self.powerline_hz not in POWERLINE_CHOICES:
            raise EcgContractError(
                f"ExperimentConfig: powerline_hz must be one of "
                f"{POWERLINE_CHOICES}, got {self.powerline_hz}."
            )
        unknown = set(self.explain_predicates) - {"correct", "misclassified"}
        if unknown:
            raise EcgContractError(
                f"ExperimentConfig: unknown explain predicates {sorted(unknown)}."
            )

    @property
    def network_config(self) -> NetworkConfig:
        """Config of the selected architecture."""
        return {"vit": self.vit, "resnet": self.resnet, "cnn_lstm": self.cnn_lstm}[
            self.architecture
        ]

    @property
    def mask_padding(self) -> bool:
        """Whether the ViT hides fully padded patches."""
        return self.architecture == "vit" and self.vit.mask_padding

    def iteration_seed(self, iteration: int) -> int:
        """Seed of one iteration, derived from the master seed and a counter."""
        state = np.random.SeedSequence([self.seed, iteration]).generate_state(1)
        return int(state[0]) % _SEED_MODULUS

    def to_dict(self) -> dict[str, Any]:
        """Canonical JSON-friendly form (hashed into run manifests)."""
        data = asdict(self)
        data["ratios"] = list(self.ratios)
        data["explain_predicates"] = list(self.explain_predicates)
        data["resnet"]["blocks"] = list(self.resnet.blocks)
        return data

    @property
    def config_hash(self) -> str:
        """SHA-256 of the canonical form."""
        return config_hash(self.to_dict())


@dataclass
class IterationResult:
    """Outcome of one split/train/evaluate/explain iteration."""

    iteration: int
    seed: int
    model: TrainedModel
    history: TrainingHistory
    segment_report: MetricsReport
    patient_report: MetricsReport
    averaged_maps: list[AveragedMap] = field(default_factory=list)


@dataclass
class ExperimentResult:
    """All iterations of an experiment and their averages."""

    run_dir: Path
    config: ExperimentConfig
    iterations: list[IterationResult]
    summary: pd.DataFrame

    def overall_accuracy(self, level: str = "segment") -> tuple[float, float]:
        """Mean and standard deviation of overall accuracy over iterations."""
        values = np.array(
            [
                (
                    result.segment_report
                    if level == "segment"
                    else result.patient_report
                ).overall_accuracy
                for result in self.iterations
            ]
        )
        return float(values.mean()), float(values.std())


def shuffle_patient_labels(
    segments: list[RrrSegment], seed: int
) -> list[RrrSegment]:
    """Permute labels between patients, keeping each patient's segments together."""
    patients = list(dict.fromkeys(segment.patient_id for segment in segments))
    label_of = {segment.patient_id: segment.label for segment in segments}
    permuted = np.random.default_rng(seed).permutation(
        [label_of[patient] for patient in patients]
    )
    new_label = dict(zip(patients, permuted, strict=True))
    return [
        replace(segment, label=str(new_label[segment.patient_id]))
        for segment in segments
    ]


def prepare_segments(config: ExperimentConfig) -> list[RrrSegment]:
    """Segment corpus of an experiment: cache, manifest or synthetic data.

    Raises:
        EcgContractError: The cache was built with another normalization.
    """
    if config.segment_cache:
        segments, metadata = load_segment_cache(Path(config.segment_cache))
        cached = metadata.get("normalization", config.normalization)
        if cached != config.normalization:
            raise EcgContractError(
                f"Segment cache {config.segment_cache} uses normalization "
                f"'{cached}', experiment expects '{config.normalization}'."
            )
        _LOGGER.info("Loaded %d cached segments", len(segments))
    else:
        if config.manifest:
            recordings = ingest(config.manifest, lead=config.lead)
        else:
            recordings = generate_synthetic(
                config.synthetic, config.synthetic_patients, config.seed
            )
        segments, _ = process_recordings(
            recordings, config.normalization, config.powerline_hz
        )
    if config.shuffle_labels:
        _LOGGER.warning("Shuffling patient labels (control run)")
        segments = shuffle_patient_labels(segments, config.seed)
    return segments


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    with atomic_write(path) as file:
        frame.to_csv(file, index=False, float_format="%.9g")


def _write_json(data: dict[str, Any], path: Path) -> None:
    with atomic_write(path) as file:
        json.dump(data, file, indent=2, sort_keys=True)
        file.write("\n")


def _tagged(frame: pd.DataFrame, iteration: int) -> pd.DataFrame:
    return frame.assign(iteration=iteration)[["iteration", *frame.columns]]


def _write_iteration(
    result: IterationResult, split: dict[str, Any], path: Path
) -> None:
    index = result.iteration
    segment, patient = result.segment_report, result.patient_report
    _write_csv(_tagged(segment.to_frame(), index), path / METRICS_SEGMENT_CSV)
    _write_csv(_tagged(patient.to_frame(), index), path / METRICS_PATIENT_CSV)
    confusion = pd.concat(
        [confusion_frame(segment), confusion_frame(patient)], ignore_index=True
    )
    _write_csv(_tagged(confusion, index), path / CONFUSION_CSV)
    _write_csv(_tagged(result.history.to_frame(), index), path / HISTORY_CSV)
    _write_json(split, path / SPLIT_JSON)
    if result.averaged_maps:
        export_averaged_maps(result.averaged_maps, path / HEATMAP_DIR / HEATMAP_CSV)


def run_iteration(
    segments: list[RrrSegment],
    config: ExperimentConfig,
    iteration: int,
    run_dir: Path | None = None,
) -> IterationResult:
    """Split, train, evaluate and explain once.

    Args:
        segments: The full segment corpus.
        config: Experiment config.
        iteration: Iteration index; selects the seed.
        run_dir: When given, iteration artifacts and the checkpoint are
            written below it.

    Returns:
        The iteration result.
    """
    seed = config.iteration_seed(iteration)
    split = group_shuffle_split(segments, config.ratios, seed)
    model, history = train_model(
        config.architecture,
        config.network_config,
        split.train,
        split.val,
        config.training,
        seed=seed,
        normalization=config.normalization,
    )
    cache = str(run_dir / SEGMENT_CACHE) if run_dir is not None else None
    model = replace(model, split=split.to_dict(), segment_cache=cache)

    probabilities = predict_proba(model, split.test, config.training.batch_size)
    segment_report = segment_level_metrics(split.test, probabilities)
    patient_report = patient_level_metrics(split.test, probabilities)

    averaged: list[AveragedMap] = []
    if config.architecture == "cnn_lstm":
        _LOGGER.info("No importance maps for cnn_lstm; skipping explanation")
    else:
        bundles = explain_segments(
            model, split.test, config.explain, probabilities.argmax(axis=1)
        )
        averaged = average_all(bundles, LABELS, config.explain_predicates)

    result = IterationResult(
        iteration=iteration,
        seed=seed,
        model=model,
        history=history,
        segment_report=segment_report,
        patient_report=patient_report,
        averaged_maps=averaged,
    )
    _LOGGER.info(
        "Iteration %d: segment accuracy %.4f, patient accuracy %.4f",
        iteration,
        segment_report.overall_accuracy,
        patient_report.overall_accuracy,
    )
    if run_dir is not None:
        _write_iteration(result, split.to_dict(), run_dir / f"iteration_{iteration}")
        save_checkpoint(model, run_dir / CHECKPOINT_DIR / f"iteration_{iteration}")
    return result


def _manifest(
    config: ExperimentConfig,
    status: str,
    completed: list[int],
    error: str | None = None,
) -> dict[str, Any]:
    manifest: dict[str, Any] = {
        "config": config.to_dict(),
        "config_hash": config.config_hash,
        "architecture": config.architecture,
        "normalization": config.normalization,
        "mask_padding": config.mask_padding,
        "seeds": [config.iteration_seed(i) for i in range(config.n_iterations)],
        "version": version_string(),
        "status": status,
        "completed_iterations": sorted(completed),
    }
    if error is not None:
        manifest["error"] = error
    return manifest


def _write_summary(results: list[IterationResult], run_dir: Path) -> pd.DataFrame:
    segment_frames = [r.segment_report.to_frame() for r in results]
    patient_frames = [r.patient_report.to_frame() for r in results]
    iterations = [r.iteration for r in results]
    for frames, filename in (
        (segment_frames, METRICS_SEGMENT_CSV),
        (patient_frames, METRICS_PATIENT_CSV),
    ):
        tagged = [
            _tagged(frame, index)
            for frame, index in zip(frames, iterations, strict=True)
        ]
        _write_csv(pd.concat(tagged, ignore_index=True), run_dir / filename)
    confusion = [
        _tagged(confusion_frame(report), r.iteration)
        for r in results
        for report in (r.segment_report, r.patient_report)
    ]
    _write_csv(pd.concat(confusion, ignore_index=True), run_dir / CONFUSION_CSV)
    _write_csv(
        pd.concat([_tagged(r.history.to_frame(), r.iteration) for r in results]),
        run_dir / HISTORY_CSV,
    )
    summary = pd.concat(
        [average_reports(segment_frames), average_reports(patient_frames)],
        ignore_index=True,
    )
    _write_csv(summary, run_dir / METRICS_SUMMARY_CSV)
    return summary


async def run_experiment(
    config: ExperimentConfig,
    run_dir: Path,
    jobs: int = 1,
    segments: list[RrrSegment] | None = None,
) -> ExperimentResult:
    """Run all iterations, at most ``jobs`` at a time in worker threads.

    Args:
        config: Experiment config.
        run_dir: Output directory (created).
        jobs: Maximum concurrent iterations.
        segments: Pre-built corpus; prepared from the config when omitted.

    Returns:
        Per-iteration results and the averaged summary table.

    Raises:
        EcgExperimentError: An iteration failed. Artifacts of finished
            iterations stay in run_dir and run.json records the failure.
    """
    if jobs < 1:
        raise EcgContractError(f"run_experiment: jobs must be >= 1, got {jobs}.")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    completed: list[int] = []
    _write_json(_manifest(config, "running", completed), run_dir / RUN_MANIFEST)

    if segments is None:
        segments = await asyncio.to_thread(prepare_segments, config)
    save_segment_cache(
        segments, run_dir / SEGMENT_CACHE, {"normalization": config.normalization}
    )
    _write_csv(length_histogram(segments).to_frame(), run_dir / HISTOGRAM_CSV)

    semaphore = asyncio.Semaphore(jobs)

    async def _one(iteration: int) -> IterationResult:
        async with semaphore:
            result = await asyncio.to_thread(
                run_iteration, segments, config, iteration, run_dir
            )
        completed.append(iteration)
        _write_json(_manifest(config, "running", completed), run_dir / RUN_MANIFEST)
        return result

    _LOGGER.info(
        "Running %d iterations of %s (%s, jobs=%d) into %s",
        config.n_iterations,
        config.architecture,
        config.normalization,
        jobs,
        run_dir,
    )
    outcomes = await asyncio.gather(
        *(_one(iteration) for iteration in range(config.n_iterations)),
        return_exceptions=True,
    )
    failures = [outcome for outcome in outcomes if isinstance(outcome, BaseException)]
    if failures:
        first = failures[0]
        _write_json(
            _manifest(config, "failed", completed, str(first)), run_dir / RUN_MANIFEST
        )
        if not isinstance(first, Exception):
            raise first
        raise EcgExperimentError(
            f"{len(failures)} of {config.n_iterations} iterations failed: {first}",
            run_dir=run_dir,
            completed_iterations=sorted(completed),
        ) from first

    results = sorted(outcomes, key=lambda result: result.iteration)
    summary = _write_summary(results, run_dir)
    _write_json(_manifest(config, "complete", completed), run_dir / RUN_MANIFEST)
    experiment = ExperimentResult(
        run_dir=run_dir, config=config, iterations=results, summary=summary
    )
    mean, std = experiment.overall_accuracy("segment")
    _LOGGER.info(
        "Segment accuracy over %d iterations: %.4f +- %.4f", len(results), mean, std
    )
    return experiment


def summarize_runs(run_dirs: list[Path]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Collect finished run directories into comparison tables.

    Returns:
        An accuracy table with one row per (architecture, normalization,
        mask_padding) and mean/std of overall accuracy at both levels, and
        a per-label table with the averaged one-versus-rest metrics.

    Raises:
        EcgContractError: A directory holds no finished run.
    """
    accuracy_rows = []
    label_frames = []
    for run_dir in map(Path, run_dirs):
        manifest_path = run_dir / RUN_MANIFEST
        summary_path = run_dir / METRICS_SUMMARY_CSV
        if not manifest_path.is_file() or not summary_path.is_file():
            raise EcgContractError(f"summarize_runs: {run_dir} holds no finished run.")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        keys = {
            "architecture": manifest["architecture"],
            "normalization": manifest["normalization"],
            "mask_padding": manifest["mask_padding"],
        }
        row: dict[str, Any] = {**keys, "run": run_dir.name}
        for level, filename in (
            ("segment", METRICS_SEGMENT_CSV),
            ("patient", METRICS_PATIENT_CSV),
        ):
            per_iteration = (
                pd.read_csv(run_dir / filename)
                .groupby("iteration")["overall_accuracy"]
                .first()
            )
            row[f"{level}_accuracy_mean"] = float(per_iteration.mean())
            row[f"{level}_accuracy_std"] = float(per_iteration.std(ddof=0))
            row["iterations"] = len(per_iteration)
        accuracy_rows.append(row)
        label_frames.append(pd.read_csv(summary_path).assign(**keys))

    accuracy = pd.DataFrame(accuracy_rows)
    labels = (
        pd.concat(label_frames, ignore_index=True) if label_frames else pd.DataFrame()
    )
    return accuracy, labels
