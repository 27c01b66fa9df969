"""Synthetic single-lead ECG recordings with class-specific morphology.

Beats are sums of Gaussian bumps (P, Q, R, S, T) placed around each R-peak.
SR beats at about 75 bpm with regular rhythm; SB beats slowly with a
smaller P-wave; AFIB has no P-wave, small fibrillatory waves and an
irregular rhythm. R amplitudes differ per class, so amplitude alone is a
(weak) class cue that z-normalization removes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from .const import LABELS, RECORDING_SECONDS, SAMPLE_RATE_HZ, TRANSIENT_SECONDS
from .exceptions import EcgContractError
from .models import EcgRecording

_LOGGER = logging.getLogger(__name__)

# (offset from the R-peak in seconds, Gaussian width in seconds)
P_WAVE = (-0.16, 0.025)
Q_WAVE = (-0.03, 0.010)
R_WAVE = (0.0, 0.012)
S_WAVE = (0.03, 0.010)
T_WAVE = (0.25, 0.040)

MIN_RR_SECONDS = 0.3
MAX_RR_SECONDS = 1.4


@dataclass(frozen=True)
class ClassTemplate:
    """Rhythm and morphology of one class.

    Attributes:
        heart_rate_bpm: Mean heart rate.
        rate_spread_bpm: Standard deviation of the rate between patients.
        rr_jitter: Coefficient of variation of RR intervals in a recording.
        p_amplitude: P-wave amplitude (microvolts); 0 removes the wave.
        q_amplitude: Q-wave depth (microvolts).
        r_amplitude: R-wave amplitude (microvolts).
        s_amplitude: S-wave depth (microvolts).
        t_amplitude: T-wave amplitude (microvolts).
        fibrillation_amplitude: Amplitude of 4-8 Hz fibrillatory waves.
    """

    heart_rate_bpm: float
    rate_spread_bpm: float = 2.0
    rr_jitter: float = 0.03
    p_amplitude: float = 150.0
    q_amplitude: float = 100.0
    r_amplitude: float = 1000.0
    s_amplitude: float = 200.0
    t_amplitude: float = 300.0
    fibrillation_amplitude: float = 0.0

    def __post_init__(self) -> None:
        """Check ranges."""
        if self.heart_rate_bpm <= 0 or self.rate_spread_bpm < 0 or self.rr_jitter < 0:
            raise EcgContractError(f"ClassTemplate: invalid rhythm {self}.")
        if self.r_amplitude <= 0:
            raise EcgContractError(
                f"ClassTemplate: r_amplitude must be positive, got {self.r_amplitude}."
            )


def default_templates() -> dict[str, ClassTemplate]:
    """Templates for AFIB, SB and SR."""
    return {
        "AFIB": ClassTemplate(
            heart_rate_bpm=90.0,
            rate_spread_bpm=4.0,
            rr_jitter=0.15,
            p_amplitude=0.0,
            r_amplitude=700.0,
            fibrillation_amplitude=50.0,
        ),
        "SB": ClassTemplate(
            heart_rate_bpm=50.0,
            p_amplitude=80.0,
            r_amplitude=1300.0,
            t_amplitude=250.0,
        ),
        "SR": ClassTemplate(heart_rate_bpm=75.0),
    }


@dataclass(frozen=True)
class SyntheticSpec:
    """Synthetic corpus parameters.

    Attributes:
        templates: Label -> class template; every label needs one.
        noise_std_uv: White measurement noise.
        baseline_wander_uv: Amplitude of a slow (0.1-0.3 Hz) baseline drift.
        amplitude_spread: Relative between-patient amplitude variation.
        duration_s: Recording length.
        sample_rate_hz: Sampling frequency.
    """

    templates: dict[str, ClassTemplate] = field(default_factory=default_templates)
    noise_std_uv: float = 10.0
    baseline_wander_uv: float = 50.0
    amplitude_spread: float = 0.05
    duration_s: float = float(RECORDING_SECONDS)
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        """Check that every label has a template and ranges are valid."""
        missing = [label for label in LABELS if label not in self.templates]
        if missing:
            raise EcgContractError(f"SyntheticSpec: no template for {missing}.")
        unknown = sorted(set(self.templates) - set(LABELS))
        if unknown:
            raise EcgContractError(f"SyntheticSpec: unknown labels {unknown}.")
        if min(self.noise_std_uv, self.baseline_wander_uv, self.amplitude_spread) < 0:
            raise EcgContractError("SyntheticSpec: noise levels must be nonnegative.")
        if self.duration_s <= 2 * MAX_RR_SECONDS or self.sample_rate_hz <= 0:
            raise EcgContractError(
                f"SyntheticSpec: duration {self.duration_s} s too short or "
                f"invalid rate {self.sample_rate_hz}."
            )

    def to_dict(self) -> dict[str, Any]:
        """Plain form for run manifests."""
        return {
            "templates": {label: vars(t).copy() for label, t in self.templates.items()},
            "noise_std_uv": self.noise_std_uv,
            "baseline_wander_uv": self.baseline_wander_uv,
            "amplitude_spread": self.amplitude_spread,
            "duration_s": self.duration_s,
            "sample_rate_hz": self.sample_rate_hz,
        }


def _beat_times(
    template: ClassTemplate, duration_s: float, rng: np.random.Generator
) -> np.ndarray:
    drift = rng.normal(0.0, template.rate_spread_bpm)
    rate = max(template.heart_rate_bpm + drift, 20.0)
    mean_rr = 60.0 / rate
    times = []
    current = TRANSIENT_SECONDS + rng.uniform(0.1, 0.3)
    while current < duration_s - 0.3:
        times.append(current)
        interval = mean_rr * (1.0 + template.rr_jitter * rng.standard_normal())
        current += float(np.clip(interval, MIN_RR_SECONDS, MAX_RR_SECONDS))
    return np.array(times)


def synthesize_recording(
    template: ClassTemplate, spec: SyntheticSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One recording and the sample indices of its true R-peaks."""
    rate = spec.sample_rate_hz
    t = np.arange(int(round(spec.duration_s * rate))) / rate
    beats = _beat_times(template, spec.duration_s, rng)
    scale = 1.0 + spec.amplitude_spread * rng.standard_normal()

    waves = (
        (P_WAVE, template.p_amplitude),
        (Q_WAVE, -template.q_amplitude),
        (R_WAVE, template.r_amplitude),
        (S_WAVE, -template.s_amplitude),
        (T_WAVE, template.t_amplitude),
    )
    signal = np.zeros_like(t)
    for (offset, width), amplitude in waves:
        if amplitude == 0:
            continue
        distance = (t[:, None] - (beats[None, :] + offset)) / width
        signal += amplitude * np.exp(-0.5 * distance**2).sum(axis=1)
    signal *= scale

    if template.fibrillation_amplitude > 0:
        for _ in range(2):
            frequency = rng.uniform(4.0, 8.0)
            phase = rng.uniform(0, 2 * np.pi)
            signal += (
                template.fibrillation_amplitude
                / 2
                * np.sin(2 * np.pi * frequency * t + phase)
            )
    wander = rng.uniform(0.1, 0.3)
    signal += spec.baseline_wander_uv * np.sin(
        2 * np.pi * wander * t + rng.uniform(0, 2 * np.pi)
    )
    signal += rng.normal(0.0, spec.noise_std_uv, size=t.shape)

    peaks = np.round(beats * rate).astype(np.int64)
    return signal, peaks[peaks < len(t)]


def generate_synthetic_with_peaks(
    spec: SyntheticSpec | None = None,
    n_patients: int | dict[str, int] = 30,
    seed: int = 0,
) -> list[tuple[EcgRecording, np.ndarray]]:
    """Recordings with their true R-peak indices, deterministic per seed.

    Args:
        spec: Corpus parameters; defaults to SyntheticSpec().
        n_patients: Patients per class, or a label -> count mapping.
        seed: Generator seed.

    Raises:
        EcgContractError: Negative patient counts or unknown labels.
    """
    spec = spec or SyntheticSpec()
    counts = (
        dict.fromkeys(LABELS, n_patients)
        if isinstance(n_patients, int)
        else dict(n_patients)
    )
    if any(label not in LABELS for label in counts) or min(counts.values()) < 0:
        raise EcgContractError(f"generate_synthetic: invalid patient counts {counts}.")

    rng = np.random.default_rng(seed)
    generated: list[tuple[EcgRecording, np.ndarray]] = []
    for label in LABELS:
        for _ in range(counts.get(label, 0)):
            samples, peaks = synthesize_recording(spec.templates[label], spec, rng)
            recording = EcgRecording(
                patient_id=f"SYN{len(generated):05d}",
                label=label,
                samples=samples,
                sample_rate_hz=spec.sample_rate_hz,
            )
            generated.append((recording, peaks))
    _LOGGER.info("Generated %d synthetic recordings (seed %d)", len(generated), seed)
    return generated


def generate_synthetic(
    spec: SyntheticSpec | None = None,
    n_patients: int | dict[str, int] = 30,
    seed: int = 0,
) -> list[EcgRecording]:
    """Synthetic recordings, deterministic per seed (see above)."""
    return [
        recording
        for recording, _ in generate_synthetic_with_peaks(spec, n_patients, seed)
    ]


def recordings_frame(recordings: list[EcgRecording]) -> pd.DataFrame:
    """Wide manifest table (patient_id, label, lead, sample_rate_hz, s0..sN)."""
    width = max((len(recording.samples) for recording in recordings), default=0)
    sample_columns = [f"s{index}" for index in range(width)]
    meta = pd.DataFrame(
        {
            "patient_id": [recording.patient_id for recording in recordings],
            "label": [recording.label for recording in recordings],
            "lead": [recording.lead for recording in recordings],
            "sample_rate_hz": [recording.sample_rate_hz for recording in recordings],
        }
    )
    samples = pd.DataFrame(
        [np.round(recording.samples, 3) for recording in recordings],
        columns=sample_columns,
    )
    return pd.concat([meta, samples], axis=1)
