"""Tests for the synthetic recording generator."""

import json

import numpy as np
import pytest

from ecg_xai.const import TRANSIENT_SECONDS
from ecg_xai.dataset import ingest
from ecg_xai.exceptions import EcgContractError
from ecg_xai.synthetic import (
    ClassTemplate,
    SyntheticSpec,
    default_templates,
    generate_synthetic,
    generate_synthetic_with_peaks,
    recordings_frame,
)


def test_generation_is_deterministic():
    """Test equal seeds give identical recordings; other seeds differ."""
    # Act: Generate three corpora.
    first = generate_synthetic(n_patients=2, seed=5)
    second = generate_synthetic(n_patients=2, seed=5)
    other = generate_synthetic(n_patients=2, seed=6)

    # Assert: Equal for seed 5, different for seed 6.
    for a, b in zip(first, second, strict=True):
        assert a.patient_id == b.patient_id
        np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(first[0].samples, other[0].samples)


def test_counts_per_label():
    """Test a count mapping controls patients per class."""
    # Act: Two SR and one AFIB patient.
    recordings = generate_synthetic(n_patients={"SR": 2, "AFIB": 1}, seed=0)

    # Assert: Labels in class order, unique ids, 10 s at 500 Hz.
    assert [r.label for r in recordings] == ["AFIB", "SR", "SR"]
    assert len({r.patient_id for r in recordings}) == 3
    assert all(len(r.samples) == 5000 for r in recordings)


def test_true_peaks_avoid_filter_transient():
    """Test every true R-peak lies after the filter warm-up."""
    # Act: Recordings with peaks.
    generated = generate_synthetic_with_peaks(n_patients=3, seed=2)

    # Assert: Peaks sorted, inside the recording and after the transient.
    for recording, peaks in generated:
        assert np.all(np.diff(peaks) > 0)
        assert peaks[0] > TRANSIENT_SECONDS * recording.sample_rate_hz
        assert peaks[-1] < len(recording.samples)


def test_invalid_counts_and_specs():
    """Test unknown labels, negative counts and incomplete templates."""
    # Act and Assert: Each invalid input is a contract error.
    with pytest.raises(EcgContractError, match="patient counts"):
        generate_synthetic(n_patients={"VT": 1})
    with pytest.raises(EcgContractError, match="patient counts"):
        generate_synthetic(n_patients={"SR": -1})
    templates = default_templates()
    del templates["SB"]
    with pytest.raises(EcgContractError, match="no template"):
        SyntheticSpec(templates=templates)
    with pytest.raises(EcgContractError, match="rhythm"):
        ClassTemplate(heart_rate_bpm=-60.0)


def test_spec_to_dict_is_json_serializable():
    """Test the corpus parameters can be written to a run manifest."""
    # Act: Serialize the default spec.
    payload = json.loads(json.dumps(SyntheticSpec().to_dict()))

    # Assert: Templates for all classes.
    assert sorted(payload["templates"]) == ["AFIB", "SB", "SR"]
    assert payload["templates"]["SB"]["heart_rate_bpm"] == 50.0


def test_recordings_frame_round_trips_through_ingest(tmp_path):
    """Test a written synthetic manifest ingests back to the same signals."""
    # Arrange: One patient per class written as a wide manifest.
    recordings = generate_synthetic(n_patients=1, seed=4)
    manifest = tmp_path / "synthetic.csv"
    recordings_frame(recordings).to_csv(manifest, index=False)

    # Act: Ingest.
    loaded = ingest(manifest)

    # Assert: Same ids, labels and samples to three decimals.
    assert [r.patient_id for r in loaded] == [r.patient_id for r in recordings]
    assert [r.label for r in loaded] == [r.label for r in recordings]
    for original, restored in zip(recordings, loaded, strict=True):
        np.testing.assert_allclose(restored.samples, original.samples, atol=1e-3)
