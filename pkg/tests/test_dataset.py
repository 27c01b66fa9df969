"""Tests for manifest ingestion, the segment cache and patient splits."""

import logging

import numpy as np
import pandas as pd
import pytest

from ecg_xai.const import ENV_DATA_DIR
from ecg_xai.dataset import (
    group_shuffle_split,
    ingest,
    label_counts,
    load_segment_cache,
    resolve_data_path,
    save_segment_cache,
    select_patients,
)
from ecg_xai.exceptions import EcgContractError, EcgDataError


@pytest.fixture
def cohort(make_segment):
    """Factory for segments of n patients per class, two segments each."""

    def _make(per_class: int):
        segments = []
        for label in ("AFIB", "SB", "SR"):
            for index in range(per_class):
                patient = f"{label}-{index:03d}"
                segments.append(make_segment(patient, label, length=400))
                segments.append(make_segment(patient, label, length=700))
        return segments

    return _make


def test_ingest_wide_manifest(fixture_path, caplog):
    """Test one recording per row, skipping rows of other leads."""
    # Act: Ingest lead II.
    with caplog.at_level(logging.WARNING):
        recordings = ingest(fixture_path("manifests/wide.csv"))

    # Assert: Three recordings in manifest order.
    assert [r.patient_id for r in recordings] == ["MUSE_001", "MUSE_002", "MUSE_003"]
    assert [r.label for r in recordings] == ["SR", "AFIB", "SB"]
    np.testing.assert_array_equal(
        recordings[0].samples, [0.0, 12.5, 40.0, -8.0, 3.0, 1.0]
    )
    assert recordings[0].sample_rate_hz == 500
    assert "Skipped 1 rows" in caplog.text


def test_ingest_other_lead(fixture_path):
    """Test selecting V1 keeps only the V1 row."""
    # Act: Ingest lead V1.
    recordings = ingest(fixture_path("manifests/wide.csv"), lead="V1")

    # Assert: The single V1 recording.
    assert len(recordings) == 1
    assert recordings[0].lead == "V1"
    np.testing.assert_array_equal(recordings[0].samples, np.full(6, 9.0))


def test_ingest_reports_bad_rows_with_line_numbers(fixture_path):
    """Test strict ingestion lists every invalid row by line."""
    # Act and Assert: An unknown label and a non-numeric sample.
    with pytest.raises(EcgDataError) as err:
        ingest(fixture_path("manifests/bad_rows.csv"))
    assert err.value.error_id == "manifest-row"
    assert [error["line"] for error in err.value.row_errors] == [3, 4]
    assert "VT" in err.value.row_errors[0]["message"]
    assert "line 4" in str(err.value)


def test_ingest_lenient_skips_bad_rows(fixture_path, caplog):
    """Test non-strict ingestion keeps the valid rows and warns."""
    # Act: Lenient ingestion.
    with caplog.at_level(logging.WARNING):
        recordings = ingest(fixture_path("manifests/bad_rows.csv"), strict=False)

    # Assert: Two valid rows and two warnings.
    assert [r.patient_id for r in recordings] == ["MUSE_010", "MUSE_013"]
    assert caplog.text.count("Rejected line") == 2


def test_ingest_empty_manifest(fixture_path, caplog):
    """Test an empty manifest yields no recordings and a warning."""
    # Act: Ingest an empty file.
    with caplog.at_level(logging.WARNING):
        recordings = ingest(fixture_path("manifests/empty.csv"))

    # Assert: Nothing ingested.
    assert recordings == []
    assert "lists no recordings" in caplog.text


def test_ingest_manifest_errors(fixture_path, tmp_path):
    """Test missing manifests and manifests without samples are data errors."""
    # Act and Assert: Missing file.
    with pytest.raises(EcgDataError) as err:
        ingest(tmp_path / "absent.csv")
    assert err.value.error_id == "manifest"

    # Act and Assert: Neither sample columns nor paths.
    with pytest.raises(EcgDataError, match="path"):
        ingest(fixture_path("manifests/no_samples.csv"))


def test_ingest_file_list_manifest(tmp_path):
    """Test path manifests read one CSV per recording relative to the manifest."""
    # Arrange: A twelve-lead file with a header and a single-column file.
    records = tmp_path / "records"
    records.mkdir()
    twelve = pd.DataFrame(
        np.arange(24, dtype=float).reshape(2, 12),
        columns=["I", "II", "III", "aVR", "aVL", "aVF"]
        + ["V1", "V2", "V3", "V4", "V5", "V6"],
    )
    twelve.to_csv(records / "A.csv", index=False)
    pd.DataFrame({"value": [5.0, 6.0, 7.0]}).to_csv(records / "B.csv", index=False)
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        "patient_id,label,path\nA,SR,records/A.csv\n,SB,records/B.csv\n"
    )

    # Act: Ingest lead II.
    recordings = ingest(manifest)

    # Assert: Lead II column and the file stem as fallback patient id.
    np.testing.assert_array_equal(recordings[0].samples, [1.0, 13.0])
    assert recordings[1].patient_id == "B"
    np.testing.assert_array_equal(recordings[1].samples, [5.0, 6.0, 7.0])


def test_ingest_missing_recording_file(tmp_path):
    """Test a path row pointing nowhere is a row error."""
    # Arrange: Manifest with a dangling path.
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("patient_id,label,path\nA,SR,missing.csv\n")

    # Act and Assert: Line 2 reported.
    with pytest.raises(EcgDataError) as err:
        ingest(manifest)
    assert err.value.row_errors[0]["line"] == 2
    assert "not found" in err.value.row_errors[0]["message"]


def test_resolve_data_path_uses_environment(tmp_path, monkeypatch):
    """Test relative paths fall back to the data directory variable."""
    # Arrange: A file under the data directory only.
    (tmp_path / "manifest.csv").write_text("patient_id,label,path\n")
    monkeypatch.setenv(ENV_DATA_DIR, str(tmp_path))

    # Act: Resolve a bare name.
    resolved = resolve_data_path("manifest.csv")

    # Assert: Found under the data directory.
    assert resolved == tmp_path / "manifest.csv"


def test_split_counts_for_100_patients(make_segment):
    """Test 100 patients split 70/15/15."""
    # Arrange: 34 AFIB, 33 SB and 33 SR patients.
    segments = [
        make_segment(f"{label}{i}", label)
        for label, count in (("AFIB", 34), ("SB", 33), ("SR", 33))
        for i in range(count)
    ]

    # Act: Split.
    split = group_shuffle_split(segments, seed=3)

    # Assert: Patient counts per part.
    assert len(split.patients("train")) == 70
    assert len(split.patients("val")) == 15
    assert len(split.patients("test")) == 15


@pytest.mark.parametrize("per_class", [3, 5, 10])
def test_split_puts_every_label_in_every_part(cohort, per_class):
    """Test small cohorts still give each part patients of all three labels."""
    # Arrange: Few patients per class.
    segments = cohort(per_class)

    for seed in range(20):
        # Act: Split.
        split = group_shuffle_split(segments, seed=seed)

        # Assert: Every label in train, validation and test.
        for part in (split.train, split.val, split.test):
            assert {s.label for s in part} == {"AFIB", "SB", "SR"}


def test_split_counts_per_class(cohort):
    """Test ratios are applied to the patients of each class."""
    # Arrange: Five patients per class.
    segments = cohort(5)

    # Act: Split.
    split = group_shuffle_split(segments, seed=2)

    # Assert: One validation and one test patient per class, three in train.
    assert len(split.patients("train")) == 9
    assert len(split.patients("val")) == 3
    assert len(split.patients("test")) == 3


def test_split_rejects_patient_with_two_labels(cohort, make_segment):
    """Test a patient listed under two labels cannot be assigned to one part."""
    # Arrange: SR-000 also has an AFIB segment.
    segments = [*cohort(4), make_segment("SR-000", "AFIB")]

    # Act and Assert: Rejected with the patient named.
    with pytest.raises(EcgContractError, match="SR-000"):
        group_shuffle_split(segments)


def test_split_is_patient_disjoint_for_many_seeds(cohort):
    """Test no patient appears in two parts, for 100 seeds."""
    # Arrange: Ten patients per class.
    segments = cohort(10)

    for seed in range(100):
        # Act: Split.
        split = group_shuffle_split(segments, seed=seed)

        # Assert: Disjoint parts covering every segment.
        train, val, test = (split.patients(p) for p in ("train", "val", "test"))
        assert not (train & val or train & test or val & test)
        assert len(split.train) + len(split.val) + len(split.test) == len(segments)


def test_split_is_deterministic(cohort):
    """Test the same seed gives the same patients per part."""
    # Arrange: Cohort.
    segments = cohort(6)

    # Act: Split twice with seed 11 and once with seed 12.
    first = group_shuffle_split(segments, seed=11).to_dict()
    second = group_shuffle_split(segments, seed=11).to_dict()
    other = group_shuffle_split(segments, seed=12).to_dict()

    # Assert: Equal for equal seeds.
    assert first == second
    assert other["seed"] == 12


def test_split_needs_three_patients_per_class(cohort, make_segment):
    """Test a class with two patients cannot be split."""
    # Arrange: SB has only two patients.
    segments = [s for s in cohort(5) if s.label != "SB"]
    segments += [make_segment("SB-a", "SB"), make_segment("SB-b", "SB")]

    # Act and Assert: Rejected with the short class named.
    with pytest.raises(EcgContractError, match="SB"):
        group_shuffle_split(segments)


def test_split_rejects_bad_ratios(cohort):
    """Test ratios must be positive and sum to one."""
    # Act and Assert: Sum 1.1.
    with pytest.raises(EcgContractError, match="ratios"):
        group_shuffle_split(cohort(5), ratios=(0.7, 0.2, 0.2))


def test_label_counts_and_select_patients(cohort):
    """Test patient counting and patient selection."""
    # Arrange: Four patients per class, two segments each.
    segments = cohort(4)

    # Act: Count and select.
    counts = label_counts(segments)
    selected = select_patients(segments, ["SR-000", "AFIB-003"])

    # Assert: Patients, not segments, are counted.
    assert counts == {"AFIB": 4, "SB": 4, "SR": 4}
    assert [s.patient_id for s in selected] == ["AFIB-003"] * 2 + ["SR-000"] * 2


def test_segment_cache_round_trip(tmp_path, synthetic_segments):
    """Test segments and metadata survive the cache."""
    # Arrange: Real segments and metadata.
    metadata = {"normalization": "zscore", "powerline_hz": 50}

    # Act: Save and load.
    path = save_segment_cache(synthetic_segments, tmp_path / "segments.npz", metadata)
    loaded, loaded_metadata = load_segment_cache(path)

    # Assert: Same segments in the same order.
    assert loaded_metadata == metadata
    assert len(loaded) == len(synthetic_segments)
    for original, restored in zip(synthetic_segments, loaded, strict=True):
        assert restored.patient_id == original.patient_id
        assert restored.label == original.label
        assert restored.original_length == original.original_length
        assert restored.start == original.start
        np.testing.assert_array_equal(restored.padded, original.padded)


def test_segment_cache_errors(tmp_path):
    """Test missing and foreign files are cache errors."""
    # Arrange: A numpy archive without the cache fields.
    foreign = tmp_path / "foreign.npz"
    np.savez(foreign, values=np.ones(3))

    # Act and Assert: Missing and foreign files.
    with pytest.raises(EcgDataError) as err:
        load_segment_cache(tmp_path / "absent.npz")
    assert err.value.error_id == "cache"
    with pytest.raises(EcgDataError, match="not a segment cache"):
        load_segment_cache(foreign)
