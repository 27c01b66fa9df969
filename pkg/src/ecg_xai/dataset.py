"""Recording ingestion, segment cache and patient-grouped splitting."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from sklearn.model_selection import GroupShuffleSplit

from .const import (
    DEFAULT_LEAD,
    DEFAULT_SPLIT_RATIOS,
    ENV_DATA_DIR,
    LABELS,
    LEADS,
    MAX_SEGMENT_LENGTH,
    MIN_PATIENTS_PER_CLASS,
    SAMPLE_RATE_HZ,
)
from .exceptions import EcgContractError, EcgDataError, EcgInvalidInputError
from .models import DatasetSplit, EcgRecording, RrrSegment
from .utils import atomic_write

_LOGGER = logging.getLogger(__name__)

# Header row counts as line 1 in row error messages.
_FIRST_DATA_LINE = 2


def resolve_data_path(path: Path | str, base: Path | None = None) -> Path:
    """Resolve a relative path against base, ECG_XAI_DATA_DIR or the cwd."""
    path = Path(path)
    if path.is_absolute():
        return path
    if base is not None and (base / path).exists():
        return base / path
    data_dir = os.environ.get(ENV_DATA_DIR)
    if data_dir and (Path(data_dir) / path).exists():
        return Path(data_dir) / path
    return path


def _read_recording_file(path: Path, lead: str) -> np.ndarray:
    """Samples of one lead from a per-recording CSV.

    Accepts a header with lead names, a single value column, or twelve
    headerless columns in standard lead order.
    """
    frame = pd.read_csv(path)
    if lead in frame.columns:
        column = frame[lead]
    elif frame.shape[1] == 1:
        column = frame.iloc[:, 0]
    else:
        frame = pd.read_csv(path, header=None)
        if frame.shape[1] != len(LEADS):
            raise EcgInvalidInputError(
                f"{path.name}: no '{lead}' column and {frame.shape[1]} unnamed columns."
            )
        column = frame.iloc[:, LEADS.index(lead)]
    return pd.to_numeric(column, errors="raise").to_numpy(dtype=np.float64)


def _record_from_file_row(
    row: dict[str, Any], base: Path, lead: str
) -> EcgRecording:
    path = resolve_data_path(str(row["path"]), base)
    if not path.is_file():
        raise EcgInvalidInputError(f"recording file {path} not found")
    patient_id = row.get("patient_id")
    return EcgRecording(
        patient_id=patient_id if isinstance(patient_id, str) else path.stem,
        label=str(row.get("label", "")),
        lead=lead,
        sample_rate_hz=int(row.get("sample_rate_hz") or SAMPLE_RATE_HZ),
        samples=_read_recording_file(path, lead),
    )


def ingest(
    manifest: Path | str,
    lead: str = DEFAULT_LEAD,
    strict: bool = True,
) -> list[EcgRecording]:
    """Load and validate the recordings listed in a manifest CSV.

    Two layouts are accepted: one recording per row with columns
    ``patient_id,label,lead,sample_rate_hz,s0..sN``; or a file list with
    columns ``patient_id,label,path`` pointing at per-recording CSVs
    (relative paths resolve against the manifest directory, then
    ECG_XAI_DATA_DIR).

    Args:
        manifest: Manifest path.
        lead: Lead to keep; rows of other leads are skipped with a warning.
        strict: Raise on invalid rows instead of skipping them.

    Returns:
        The valid recordings in manifest order.

    Raises:
        EcgDataError: Manifest missing or unreadable, or (strict) invalid rows,
            each reported with its line number.
    """
    path = resolve_data_path(manifest)
    if not path.is_file():
        raise EcgDataError(f"Manifest {path} not found.", error_id="manifest")
    try:
        frame = pd.read_csv(
            path, dtype={"patient_id": str, "label": str, "lead": str, "path": str}
        )
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame()
    except (pd.errors.ParserError, UnicodeDecodeError) as err:
        raise EcgDataError(
            f"Manifest {path} is not valid CSV: {err}", error_id="manifest"
        ) from err

    if frame.empty:
        _LOGGER.warning("Manifest %s lists no recordings", path)
        return []

    file_mode = "path" in frame.columns
    if not file_mode and "s0" not in frame.columns:
        raise EcgDataError(
            f"Manifest {path} needs a 'path' column or sample columns s0..sN.",
            error_id="manifest",
        )

    recordings: list[EcgRecording] = []
    row_errors: list[dict[str, Any]] = []
    skipped_leads = 0
    for offset, row in enumerate(frame.to_dict(orient="records")):
        line = offset + _FIRST_DATA_LINE
        row_lead = row.get("lead")
        if isinstance(row_lead, str) and row_lead and row_lead != lead:
            skipped_leads += 1
            continue
        try:
            if file_mode:
                recording = _record_from_file_row(row, path.parent, lead)
            else:
                recording = EcgRecording.from_row({**row, "lead": lead})
        except (EcgInvalidInputError, ValueError, TypeError) as err:
            row_errors.append({"line": line, "message": str(err)})
            continue
        if not recording.patient_id or recording.patient_id == "nan":
            row_errors.append({"line": line, "message": "missing patient_id"})
            continue
        recordings.append(recording)

    if skipped_leads:
        _LOGGER.warning("Skipped %d rows of leads other than %s", skipped_leads, lead)
    if row_errors:
        if strict:
            raise EcgDataError(
                f"{len(row_errors)} invalid rows in {path.name}",
                error_id="manifest-row",
                row_errors=row_errors,
            )
        for error in row_errors:
            _LOGGER.warning("Rejected line %s: %s", error["line"], error["message"])

    counts = label_counts(recordings)
    for label in LABELS:
        _LOGGER.info("Ingested %s: %d patients", label, counts.get(label, 0))
    return recordings


def label_counts(recordings: Sequence[EcgRecording | RrrSegment]) -> dict[str, int]:
    """Number of distinct patients per label."""
    patients = {(item.label, item.patient_id) for item in recordings}
    return dict(Counter(label for label, _ in patients))


def save_segment_cache(
    segments: Sequence[RrrSegment],
    path: Path,
    metadata: dict[str, Any] | None = None,
) -> Path:
    """Write segments into a compressed ``.npz`` cache (atomically)."""
    padded = (
        np.stack([segment.padded for segment in segments])
        if segments
        else np.zeros((0, MAX_SEGMENT_LENGTH))
    )
    with atomic_write(Path(path), "wb") as file:
        np.savez_compressed(
            file,
            patient_id=np.array(
                [segment.patient_id for segment in segments], dtype=str
            ),
            label=np.array([segment.label for segment in segments], dtype=str),
            original_length=np.array(
                [segment.original_length for segment in segments], dtype=np.int64
            ),
            start=np.array([segment.start for segment in segments], dtype=np.int64),
            padded=padded,
            metadata=np.array(json.dumps(metadata or {}, sort_keys=True)),
        )
    _LOGGER.info("Cached %d segments in %s", len(segments), path)
    return Path(path)


def load_segment_cache(path: Path) -> tuple[list[RrrSegment], dict[str, Any]]:
    """Read a cache written by :func:`save_segment_cache`.

    Raises:
        EcgDataError: File missing or not a segment cache.
    """
    path = resolve_data_path(path)
    if not path.is_file():
        raise EcgDataError(f"Segment cache {path} not found.", error_id="cache")
    try:
        with np.load(path, allow_pickle=False) as archive:
            metadata = json.loads(str(archive["metadata"]))
            segments = [
                RrrSegment(
                    patient_id=str(patient_id),
                    label=str(label),
                    original_length=int(length),
                    padded=padded,
                    start=int(start),
                )
                for patient_id, label, length, start, padded in zip(
                    archive["patient_id"],
                    archive["label"],
                    archive["original_length"],
                    archive["start"],
                    archive["padded"],
                    strict=True,
                )
            ]
    except (KeyError, ValueError, OSError) as err:
        raise EcgDataError(
            f"{path} is not a segment cache: {err}", error_id="cache"
        ) from err
    return segments, metadata


def _split_counts(
    n_patients: int, ratios: tuple[float, float, float]
) -> tuple[int, int, int]:
    n_val = max(1, int(n_patients * ratios[1] + 0.5))
    n_test = max(1, int(n_patients * ratios[2] + 0.5))
    return n_patients - n_val - n_test, n_val, n_test


def _split_label(
    patients: np.ndarray, ratios: tuple[float, float, float], seed: int
) -> dict[str, str]:
    _, n_val, n_test = _split_counts(len(patients), ratios)
    first = GroupShuffleSplit(n_splits=1, test_size=n_val + n_test, random_state=seed)
    train_idx, rest_idx = next(first.split(patients, groups=patients))
    rest = patients[rest_idx]
    second = GroupShuffleSplit(n_splits=1, test_size=n_test, random_state=seed + 1)
    val_idx, test_idx = next(second.split(rest, groups=rest))

    part_of = {patient: "train" for patient in patients[train_idx]}
    part_of.update({patient: "val" for patient in rest[val_idx]})
    part_of.update({patient: "test" for patient in rest[test_idx]})
    return part_of


def group_shuffle_split(
    segments: Sequence[RrrSegment],
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
    seed: int = 0,
) -> DatasetSplit:
    """Split segments into patient-disjoint train/validation/test parts.

    Ratios apply to the patients of each class separately: validation and
    test each get round-half-up(n * ratio) patients of the class, at least
    one, and train the rest. Every part therefore holds every label
    (33 patients per class give 23/5/5).

    Raises:
        EcgContractError: Invalid ratios, a class with fewer than three
            patients, or a patient listed under two labels.
    """
    ratios = tuple(float(ratio) for ratio in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise EcgContractError(
            f"group_shuffle_split: ratios must be three positive values "
            f"summing to 1, got {ratios}."
        )
    counts = label_counts(segments)
    short = {label: counts.get(label, 0) for label in LABELS}
    short = {label: n for label, n in short.items() if n < MIN_PATIENTS_PER_CLASS}
    if short:
        raise EcgContractError(
            f"group_shuffle_split: need >= {MIN_PATIENTS_PER_CLASS} patients per "
            f"class, got {short}."
        )
    labels_of: dict[str, set[str]] = {}
    for segment in segments:
        labels_of.setdefault(segment.patient_id, set()).add(segment.label)
    mixed = sorted(patient for patient, labels in labels_of.items() if len(labels) > 1)
    if mixed:
        raise EcgContractError(
            f"group_shuffle_split: patients with more than one label: {mixed[:5]}."
        )

    part_of: dict[str, str] = {}
    for index, label in enumerate(LABELS):
        patients = np.unique(
            [segment.patient_id for segment in segments if segment.label == label]
        )
        part_of.update(_split_label(patients, ratios, seed + 2 * index))
    parts: dict[str, list[RrrSegment]] = {"train": [], "val": [], "test": []}
    for segment in segments:
        parts[part_of[segment.patient_id]].append(segment)

    sizes = Counter(part_of.values())
    _LOGGER.info(
        "Split %d patients into %d/%d/%d (seed %d)",
        len(part_of),
        sizes["train"],
        sizes["val"],
        sizes["test"],
        seed,
    )
    return DatasetSplit(
        train=parts["train"],
        val=parts["val"],
        test=parts["test"],
        seed=seed,
        ratios=ratios,
    )


def select_patients(
    segments: Sequence[RrrSegment], patients: Sequence[str]
) -> list[RrrSegment]:
    """Segments whose patient is in patients, in input order."""
    wanted = set(patients)
    return [segment for segment in segments if segment.patient_id in wanted]
