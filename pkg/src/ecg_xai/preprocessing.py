"""Cleaning, R-peak detection and RRR segmentation of single-lead ECG."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy import signal

from .const import (
    DEFAULT_POWERLINE_HZ,
    HIGHPASS_CUTOFF_HZ,
    HIGHPASS_ORDER,
    INTEGRATION_SECONDS,
    LABELS,
    MAX_SEGMENT_LENGTH,
    MIN_PEAKS_FOR_SEGMENT,
    NOTCH_QUALITY,
    POWERLINE_CHOICES,
    QRS_BAND_HZ,
    REFRACTORY_SECONDS,
    TRANSIENT_SECONDS,
)
from .exceptions import (
    EcgContractError,
    EcgDegenerateSignalError,
    EcgInvalidInputError,
)
from .models import CleanedSignal, EcgRecording, LengthHistogram, RrrSegment
from .utils import mask_patient_id

_LOGGER = logging.getLogger(__name__)

Normalization = Literal["none", "zscore"]


def _highpass_sos(sample_rate_hz: int) -> np.ndarray:
    return signal.butter(
        HIGHPASS_ORDER,
        HIGHPASS_CUTOFF_HZ,
        btype="highpass",
        fs=sample_rate_hz,
        output="sos",
    )


def filter_warmup_length(sample_rate_hz: int) -> int:
    """Minimum recording length the zero-phase cleaning filters accept."""
    sos = _highpass_sos(sample_rate_hz)
    # sosfiltfilt default padlen
    trailing_zeros = min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum())
    return int(3 * (2 * len(sos) + 1 - trailing_zeros))


def clean_signal(
    raw: EcgRecording, powerline_hz: float = DEFAULT_POWERLINE_HZ
) -> CleanedSignal:
    """Remove baseline drift and powerline interference.

    A 0.5 Hz 5th-order Butterworth high-pass followed by a second-order IIR
    notch at the mains frequency, both applied forward-backward so R-peak
    positions are not shifted.

    Args:
        raw: The recording to clean.
        powerline_hz: Mains frequency, 50 or 60.

    Returns:
        Cleaned signal of the same length, without peaks.

    Raises:
        EcgInvalidInputError: Non-finite samples or unsupported mains frequency.
        EcgContractError: Recording shorter than the filter warm-up.
    """
    if powerline_hz not in POWERLINE_CHOICES:
        raise EcgInvalidInputError(
            f"powerline_hz must be one of {list(POWERLINE_CHOICES)}, "
            f"got {powerline_hz}."
        )
    if not raw.is_finite:
        raise EcgInvalidInputError(
            f"Recording {mask_patient_id(raw.patient_id)} has non-finite samples."
        )
    warmup = filter_warmup_length(raw.sample_rate_hz)
    if len(raw.samples) <= warmup:
        raise EcgContractError(
            f"clean_signal needs more than {warmup} samples, got {len(raw.samples)}."
        )

    filtered = signal.sosfiltfilt(_highpass_sos(raw.sample_rate_hz), raw.samples)
    b_notch, a_notch = signal.iirnotch(
        powerline_hz, NOTCH_QUALITY, fs=raw.sample_rate_hz
    )
    filtered = signal.filtfilt(b_notch, a_notch, filtered)

    return CleanedSignal(
        samples=filtered,
        sample_rate_hz=raw.sample_rate_hz,
        patient_id=raw.patient_id,
        label=raw.label,
    )


def _integrated_energy(samples: np.ndarray, sample_rate_hz: int) -> np.ndarray:
    """Band-pass, differentiate, square and integrate (QRS energy envelope)."""
    sos = signal.butter(
        2, QRS_BAND_HZ, btype="bandpass", fs=sample_rate_hz, output="sos"
    )
    band = signal.sosfiltfilt(sos, samples)
    slope = np.gradient(band)
    squared = slope**2
    window = max(1, int(round(INTEGRATION_SECONDS * sample_rate_hz)))
    return np.convolve(squared, np.ones(window) / window, mode="same")


def detect_r_peaks(cleaned: CleanedSignal) -> CleanedSignal:
    """Locate R-peaks with a Pan-Tompkins style detector.

    The energy envelope is thresholded adaptively (running signal and noise
    peak estimates, with a search-back at half threshold after a missed
    beat); every accepted envelope peak is refined to the signal maximum
    within half an integration window. Candidates in the first 0.5 s are
    ignored and accepted peaks keep a 200 ms refractory gap.

    Args:
        cleaned: Output of clean_signal.

    Returns:
        A copy of the input with r_peaks filled.
    """
    samples = np.asarray(cleaned.samples, dtype=np.float64)
    rate = cleaned.sample_rate_hz
    refractory = int(round(REFRACTORY_SECONDS * rate))
    transient = int(round(TRANSIENT_SECONDS * rate))
    empty = replace(cleaned, r_peaks=np.zeros(0, dtype=np.int64))

    if samples.size <= transient or not np.any(samples):
        _LOGGER.debug("No signal content, no peaks")
        return empty

    envelope = _integrated_energy(samples, rate)
    envelope[:transient] = 0.0
    if envelope.max() <= 0.0:
        return empty

    candidates, _ = signal.find_peaks(envelope, distance=refractory)
    if candidates.size == 0:
        return empty

    # Learning phase over the first two seconds after the transient.
    learning = envelope[transient : transient + 2 * rate]
    signal_level = 0.25 * learning.max()
    noise_level = 0.5 * learning.mean()

    accepted: list[int] = []
    rejected: list[int] = []
    rr_average: float | None = None
    for candidate in candidates:
        value = envelope[candidate]
        threshold = noise_level + 0.25 * (signal_level - noise_level)

        if rr_average is not None and accepted:
            gap = candidate - accepted[-1]
            if gap > 1.66 * rr_average:
                # Search back for a beat the first threshold missed.
                missed = [
                    index
                    for index in rejected
                    if accepted[-1] + refractory <= index <= candidate - refractory
                    and envelope[index] > 0.5 * threshold
                ]
                if missed:
                    best = max(missed, key=lambda index: envelope[index])
                    accepted.append(best)
                    signal_level = 0.25 * envelope[best] + 0.75 * signal_level

        if value > threshold:
            accepted.append(int(candidate))
            signal_level = 0.125 * value + 0.875 * signal_level
            if len(accepted) >= 2:
                recent = np.diff(accepted[-9:])
                rr_average = float(recent.mean())
        else:
            rejected.append(int(candidate))
            noise_level = 0.125 * value + 0.875 * noise_level

    peaks = _refine_peaks(samples, sorted(accepted), rate, refractory, transient)
    _LOGGER.debug(
        "Detected %s R-peaks for %s", len(peaks), mask_patient_id(cleaned.patient_id)
    )
    return replace(cleaned, r_peaks=np.asarray(peaks, dtype=np.int64))


def _refine_peaks(
    samples: np.ndarray,
    envelope_peaks: list[int],
    rate: int,
    refractory: int,
    transient: int,
) -> list[int]:
    """Move envelope peaks onto the signal maximum and enforce the gap."""
    half_window = max(1, int(round(INTEGRATION_SECONDS * rate / 2)))
    refined: list[int] = []
    for peak in envelope_peaks:
        start = max(transient, peak - half_window)
        stop = min(len(samples), peak + half_window + 1)
        if start >= stop:
            continue
        position = start + int(np.argmax(samples[start:stop]))
        if refined and position - refined[-1] < refractory:
            if samples[position] > samples[refined[-1]]:
                refined[-1] = position
            continue
        refined.append(position)
    return refined


@dataclass
class SegmentExtraction:
    """Segments of one recording plus the over-length drop count.

    Behaves like the list of kept segments.
    """

    segments: list[RrrSegment] = field(default_factory=list)
    dropped: int = 0

    def __iter__(self) -> Iterator[RrrSegment]:
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)

    def __getitem__(self, index: int) -> RrrSegment:
        return self.segments[index]


def pad_segment(samples: np.ndarray) -> np.ndarray:
    """Zero-pad a beat to the fixed model width.

    Args:
        samples: Beat samples, at most 1500 long.

    Returns:
        Length-1500 array with the input as prefix and zeros after it.

    Raises:
        EcgContractError: Input longer than 1500 (drop it instead).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size > MAX_SEGMENT_LENGTH:
        raise EcgContractError(
            f"pad_segment accepts 1-D input of at most {MAX_SEGMENT_LENGTH} "
            f"samples, got shape {samples.shape}."
        )
    padded = np.zeros(MAX_SEGMENT_LENGTH, dtype=np.float64)
    padded[: samples.size] = samples
    return padded


def extract_rrr_segments(
    cleaned: CleanedSignal,
    patient_id: str | None = None,
    label: str | None = None,
) -> SegmentExtraction:
    """Cut non-overlapping beats spanning three consecutive R-peaks.

    Segment i covers [r_peaks[2i], r_peaks[2i+2]); neighbouring segments
    share only the boundary peak. Segments longer than 1500 are dropped.

    Args:
        cleaned: Signal with detected peaks.
        patient_id: Overrides the patient id carried by the signal.
        label: Overrides the label carried by the signal.

    Returns:
        The kept segments and the number of dropped ones.
    """
    patient_id = patient_id if patient_id is not None else cleaned.patient_id
    label = label if label is not None else cleaned.label
    peaks = cleaned.r_peaks
    result = SegmentExtraction()

    if len(peaks) < MIN_PEAKS_FOR_SEGMENT:
        _LOGGER.warning(
            "Recording %s has %s R-peaks; no RRR segments",
            mask_patient_id(patient_id),
            len(peaks),
        )
        return result

    for index in range(0, len(peaks) - 2, 2):
        start, stop = int(peaks[index]), int(peaks[index + 2])
        length = stop - start
        if length > MAX_SEGMENT_LENGTH:
            result.dropped += 1
            continue
        result.segments.append(
            RrrSegment(
                patient_id=patient_id,
                label=label,
                original_length=length,
                padded=pad_segment(cleaned.samples[start:stop]),
                start=start,
            )
        )

    if result.dropped:
        _LOGGER.debug(
            "Dropped %s over-length segments for %s",
            result.dropped,
            mask_patient_id(patient_id),
        )
    return result


def z_normalize_recording(raw: EcgRecording) -> EcgRecording:
    """Scale a whole recording to zero mean and unit standard deviation.

    Args:
        raw: Recording to normalize (before segmentation).

    Returns:
        A new recording with normalized samples.

    Raises:
        EcgDegenerateSignalError: Constant recording.
    """
    samples = raw.samples
    std = float(np.std(samples))
    if not np.isfinite(std) or std == 0.0:
        raise EcgDegenerateSignalError(
            f"Recording {mask_patient_id(raw.patient_id)} has zero variance."
        )
    return replace(raw, samples=(samples - samples.mean()) / std)


def length_histogram(
    segments: Iterable[RrrSegment],
    bin_width: int = 50,
    max_length: int = MAX_SEGMENT_LENGTH,
) -> LengthHistogram:
    """Histogram of original segment lengths per label.

    Args:
        segments: Segments to count.
        bin_width: Width of each bin in samples.
        max_length: Upper edge of the last bin.

    Returns:
        Histogram with shared edges; empty when no segments were given.
    """
    if bin_width <= 0:
        raise EcgInvalidInputError(f"bin_width must be positive, got {bin_width}.")
    edges = np.arange(0, max_length + bin_width, bin_width, dtype=np.float64)
    lengths: dict[str, list[int]] = {}
    for segment in segments:
        lengths.setdefault(segment.label, []).append(segment.original_length)

    counts = {
        label: np.histogram(lengths[label], bins=edges)[0]
        for label in LABELS
        if label in lengths
    }
    return LengthHistogram(bin_edges=edges, counts=counts)


@dataclass
class PreprocessSummary:
    """Per-label counts collected while segmenting a corpus."""

    patients: dict[str, set[str]] = field(default_factory=dict)
    segments: dict[str, int] = field(default_factory=dict)
    dropped: int = 0
    without_beats: int = 0

    def add(self, recording: EcgRecording, extraction: SegmentExtraction) -> None:
        """Account one processed recording."""
        self.patients.setdefault(recording.label, set()).add(recording.patient_id)
        self.segments[recording.label] = self.segments.get(recording.label, 0) + len(
            extraction
        )
        self.dropped += extraction.dropped
        if not extraction.segments:
            self.without_beats += 1


def process_recording(
    recording: EcgRecording,
    normalization: Normalization = "none",
    powerline_hz: float = DEFAULT_POWERLINE_HZ,
) -> SegmentExtraction:
    """Run normalization, cleaning, detection and segmentation on one recording."""
    if normalization == "zscore":
        recording = z_normalize_recording(recording)
    elif normalization != "none":
        raise EcgInvalidInputError(
            f"normalization must be 'none' or 'zscore', got '{normalization}'."
        )
    cleaned = detect_r_peaks(clean_signal(recording, powerline_hz))
    return extract_rrr_segments(cleaned, recording.patient_id, recording.label)


def process_recordings(
    recordings: Sequence[EcgRecording],
    normalization: Normalization = "none",
    powerline_hz: float = DEFAULT_POWERLINE_HZ,
) -> tuple[list[RrrSegment], PreprocessSummary]:
    """Segment a whole corpus.

    Recordings that fail normalization (constant signal) are skipped with a
    warning; all other errors propagate.

    Returns:
        All kept segments in input order and the per-label summary.
    """
    segments: list[RrrSegment] = []
    summary = PreprocessSummary()
    for recording in recordings:
        try:
            extraction = process_recording(recording, normalization, powerline_hz)
        except EcgDegenerateSignalError as err:
            _LOGGER.warning("Skipping recording: %s", err)
            summary.add(recording, SegmentExtraction())
            continue
        summary.add(recording, extraction)
        segments.extend(extraction.segments)

    for label in LABELS:
        if label in summary.patients:
            _LOGGER.info(
                "%s: %s patients, %s segments",
                label,
                len(summary.patients[label]),
                summary.segments.get(label, 0),
            )
    if summary.dropped:
        _LOGGER.warning(
            "Dropped %s segments longer than %s samples",
            summary.dropped,
            MAX_SEGMENT_LENGTH,
        )
    return segments, summary
