"""Data models for recordings, segments, metrics and heatmaps."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import pandas as pd

from .const import (
    DEFAULT_LEAD,
    LABELS,
    LEADS,
    MAX_SEGMENT_LENGTH,
    MIN_SEGMENT_LENGTH,
    SAMPLE_RATE_HZ,
)
from .exceptions import EcgContractError, EcgInvalidInputError

Level = Literal["segment", "patient"]
Predicate = Literal["correct", "misclassified"]


@dataclass(frozen=True, eq=False)
class EcgRecording:
    """One single-lead recording of one patient.

    Attributes:
        patient_id: Opaque patient identifier (the grouping unit for splits).
        label: Diagnostic class, one of AFIB, SB, SR.
        samples: Signal in microvolts (5000 points for 10 s at 500 Hz).
        lead: ECG lead name.
        sample_rate_hz: Sampling frequency.
    """

    patient_id: str
    label: str
    samples: np.ndarray
    lead: str = DEFAULT_LEAD
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        """Validate label, lead and rate; coerce samples to a float array."""
        if self.label not in LABELS:
            raise EcgInvalidInputError(
                f"Unknown label '{self.label}'. Expected one of {list(LABELS)}."
            )
        if self.lead not in LEADS:
            raise EcgInvalidInputError(f"Unknown lead '{self.lead}'.")
        if self.sample_rate_hz <= 0:
            raise EcgInvalidInputError(
                f"sample_rate_hz must be positive, got {self.sample_rate_hz}."
            )
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise EcgInvalidInputError(
                f"samples must be one-dimensional, got shape {samples.shape}."
            )
        object.__setattr__(self, "samples", samples)

    @property
    def is_finite(self) -> bool:
        """Whether every sample is a finite number."""
        return bool(np.all(np.isfinite(self.samples)))

    @property
    def duration_seconds(self) -> float:
        """Recording duration."""
        return len(self.samples) / self.sample_rate_hz

    @classmethod
    def from_row(cls, data: dict[str, Any]) -> EcgRecording:
        """Create a recording from one wide CSV row.

        Args:
            data: Mapping with patient_id, label, lead, sample_rate_hz, s0..sN.

        Returns:
            A new EcgRecording instance.
        """
        sample_keys = sorted(
            (key for key in data if key.startswith("s") and key[1:].isdigit()),
            key=lambda key: int(key[1:]),
        )
        return cls(
            patient_id=str(data.get("patient_id", "")),
            label=str(data.get("label", "")),
            lead=str(data.get("lead") or DEFAULT_LEAD),
            sample_rate_hz=int(data.get("sample_rate_hz") or SAMPLE_RATE_HZ),
            samples=np.array([float(data[key]) for key in sample_keys]),
        )


@dataclass(frozen=True, eq=False)
class CleanedSignal:
    """Filtered recording with detected R-peaks.

    Attributes:
        samples: Filtered signal, same length as the source, microvolts.
        r_peaks: Strictly ascending sample indices (empty until detection).
        sample_rate_hz: Sampling frequency.
        patient_id: Patient of the source recording.
        label: Label of the source recording.
    """

    samples: np.ndarray
    r_peaks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sample_rate_hz: int = SAMPLE_RATE_HZ
    patient_id: str = ""
    label: str = ""

    def __post_init__(self) -> None:
        """Check peak ordering and bounds."""
        peaks = np.asarray(self.r_peaks, dtype=np.int64)
        if peaks.size:
            if np.any(np.diff(peaks) <= 0):
                raise EcgContractError("r_peaks must be strictly increasing.")
            if peaks[0] < 0 or peaks[-1] >= len(self.samples):
                raise EcgContractError(
                    f"r_peaks out of range [0, {len(self.samples)})."
                )
        object.__setattr__(self, "r_peaks", peaks)


@dataclass(frozen=True, eq=False)
class RrrSegment:
    """One heartbeat between alternating R-peaks, zero-padded to fixed width.

    The unpadded samples are a view of ``padded[:original_length]`` so the
    prefix and the padded form can never disagree.

    Attributes:
        patient_id: Patient the beat came from.
        label: Label of the patient.
        original_length: Number of real samples (2..1500).
        padded: Length-1500 array, zeros after original_length.
        start: Index of the opening R-peak in the cleaned recording.
    """

    patient_id: str
    label: str
    original_length: int
    padded: np.ndarray
    start: int = 0

    def __post_init__(self) -> None:
        """Validate the padding invariant."""
        padded = np.asarray(self.padded, dtype=np.float64)
        if padded.shape != (MAX_SEGMENT_LENGTH,):
            raise EcgContractError(
                f"padded must have shape ({MAX_SEGMENT_LENGTH},), "
                f"got {padded.shape}."
            )
        if not MIN_SEGMENT_LENGTH <= self.original_length <= MAX_SEGMENT_LENGTH:
            raise EcgContractError(
                f"original_length {self.original_length} outside "
                f"[{MIN_SEGMENT_LENGTH}, {MAX_SEGMENT_LENGTH}]."
            )
        if np.any(padded[self.original_length :] != 0.0):
            raise EcgContractError("padded tail must be all zeros.")
        object.__setattr__(self, "padded", padded)

    @property
    def samples(self) -> np.ndarray:
        """The real (unpadded) part of the beat."""
        return self.padded[: self.original_length]

    @property
    def label_index(self) -> int:
        """Class index of the label."""
        return LABELS.index(self.label)


@dataclass(frozen=True, eq=False)
class LengthHistogram:
    """Histogram of segment lengths per label.

    Attributes:
        bin_edges: Monotonic bin edges shared by all labels.
        counts: Label → counts per bin.
    """

    bin_edges: np.ndarray
    counts: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        """Whether no segment was counted."""
        return not self.counts

    def percentages(self, label: str) -> np.ndarray:
        """Counts of one label as percentage per bin (sums to 100)."""
        counts = self.counts[label]
        total = counts.sum()
        if total == 0:
            return np.zeros_like(counts, dtype=np.float64)
        return counts / total * 100.0

    def mode(self, label: str) -> float:
        """Center of the most populated bin of a label."""
        index = int(np.argmax(self.counts[label]))
        return float((self.bin_edges[index] + self.bin_edges[index + 1]) / 2)

    def to_frame(self) -> pd.DataFrame:
        """Long-form table: label, bin_start, bin_end, count, percent."""
        rows = []
        for label, counts in self.counts.items():
            percents = self.percentages(label)
            for index, count in enumerate(counts):
                rows.append(
                    {
                        "label": label,
                        "bin_start": float(self.bin_edges[index]),
                        "bin_end": float(self.bin_edges[index + 1]),
                        "count": int(count),
                        "percent": float(percents[index]),
                    }
                )
        return pd.DataFrame(
            rows, columns=["label", "bin_start", "bin_end", "count", "percent"]
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> LengthHistogram:
        """Rebuild a histogram from :meth:`to_frame` output."""
        if frame.empty:
            return cls(bin_edges=np.zeros(0))
        first = frame[frame["label"] == frame["label"].iloc[0]]
        edges = np.append(first["bin_start"].to_numpy(), first["bin_end"].iloc[-1])
        counts = {
            str(label): group["count"].to_numpy(dtype=np.int64)
            for label, group in frame.groupby("label", sort=False)
        }
        return cls(bin_edges=edges.astype(np.float64), counts=counts)


@dataclass(frozen=True)
class DatasetSplit:
    """Patient-disjoint train/validation/test partition of segments.

    Attributes:
        train: Training segments.
        val: Validation segments.
        test: Test segments.
        seed: Seed the split was drawn with.
        ratios: Patient-count ratios (train, val, test).
    """

    train: list[RrrSegment]
    val: list[RrrSegment]
    test: list[RrrSegment]
    seed: int
    ratios: tuple[float, float, float]

    def patients(self, part: str) -> set[str]:
        """Patient ids present in one part ('train', 'val' or 'test')."""
        return {segment.patient_id for segment in getattr(self, part)}

    def to_dict(self) -> dict[str, Any]:
        """Patient ids per part, for run manifests."""
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": sorted(self.patients("train")),
            "val": sorted(self.patients("val")),
            "test": sorted(self.patients("test")),
        }


@dataclass(frozen=True)
class LabelMetrics:
    """One-versus-rest metrics of a single label.

    Attributes:
        accuracy: (TP + TN) / N.
        specificity: TN / (TN + FP).
        sensitivity: TP / (TP + FN).
        precision: TP / (TP + FP).
        f1: Harmonic mean of precision and sensitivity.
        auc: ROC AUC of the label's probability column; NaN when undefined.
        support: Number of true members of the label.
    """

    accuracy: float
    specificity: float
    sensitivity: float
    precision: float
    f1: float
    auc: float
    support: int


@dataclass(frozen=True, eq=False)
class MetricsReport:
    """Classification metrics at segment or patient level.

    Attributes:
        level: 'segment' or 'patient'.
        per_label: Label → one-versus-rest metrics.
        overall_accuracy: Fraction of argmax (or vote) predictions that match.
        confusion: Rows are true labels, columns predicted labels.
        n_samples: Number of scored items.
    """

    level: Level
    per_label: dict[str, LabelMetrics]
    overall_accuracy: float
    confusion: np.ndarray
    n_samples: int

    def to_frame(self) -> pd.DataFrame:
        """Per-label table with the overall accuracy on every row."""
        rows = [
            {
                "level": self.level,
                "label": label,
                "accuracy": metrics.accuracy,
                "specificity": metrics.specificity,
                "sensitivity": metrics.sensitivity,
                "precision": metrics.precision,
                "f1": metrics.f1,
                "auc": metrics.auc,
                "support": metrics.support,
                "overall_accuracy": self.overall_accuracy,
            }
            for label, metrics in self.per_label.items()
        ]
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class MapSource:
    """Where an importance map comes from.

    Attributes:
        kind: 'attention' (ViT CLS row) or 'gradcam' (ResNet final conv).
        layer: Attention layer index, or None for Grad-CAM / all layers.
        head: Attention head index, or None for Grad-CAM / head mean.
    """

    kind: Literal["attention", "gradcam"]
    layer: int | None = None
    head: int | None = None

    @property
    def name(self) -> str:
        """Stable short name used in file names and CSV rows."""
        if self.kind == "gradcam":
            return "gradcam"
        layer = "all" if self.layer is None else str(self.layer)
        head = "mean" if self.head is None else str(self.head)
        return f"attention_l{layer}_h{head}"

    @classmethod
    def from_name(cls, name: str) -> MapSource:
        """Inverse of :attr:`name`."""
        if name == "gradcam":
            return cls("gradcam")
        match = re.fullmatch(r"attention_l(\d+|all)_h(\d+|mean)", name)
        if match is None:
            raise EcgInvalidInputError(f"Unknown map source '{name}'.")
        layer, head = match.groups()
        return cls(
            "attention",
            layer=None if layer == "all" else int(layer),
            head=None if head == "mean" else int(head),
        )


@dataclass(frozen=True, eq=False)
class HeatmapBundle:
    """Importance map of one segment on its native and the common axis.

    Attributes:
        source: Map provenance.
        raw_map: Map over patches (ViT) or final-conv positions (Grad-CAM).
        resampled_map: Unit-scaled map on the common 1500-point axis.
        resampled_signal: The segment's signal on the same axis.
        patient_id: Patient of the segment.
        label: True label.
        predicted: Predicted label.
        original_length: Real length of the segment.
    """

    source: MapSource
    raw_map: np.ndarray
    resampled_map: np.ndarray
    resampled_signal: np.ndarray
    patient_id: str
    label: str
    predicted: str
    original_length: int

    @property
    def is_correct(self) -> bool:
        """Whether the prediction matches the true label."""
        return self.label == self.predicted


@dataclass(frozen=True, eq=False)
class AveragedMap:
    """Label-averaged importance map and signal band.

    Attributes:
        label: Class the bundles were selected for.
        predicate: 'correct' or 'misclassified'.
        source: Map provenance shared by the averaged bundles.
        mean_map: Pointwise mean of the resampled maps.
        mean_signal: Pointwise mean of the resampled signals.
        std_signal: Pointwise standard deviation of the resampled signals.
        n_segments: Number of averaged bundles.
    """

    label: str
    predicate: Predicate
    source: MapSource
    mean_map: np.ndarray
    mean_signal: np.ndarray
    std_signal: np.ndarray
    n_segments: int
