"""Acceptance runs: full training budgets on the synthetic and Chapman corpora.

Deselected by default; run with ``pytest -m slow`` or ``pytest -m dataset``.
"""

import os

import pytest

from ecg_xai.const import ENV_CHAPMAN_MANIFEST
from ecg_xai.dataset import ingest, label_counts
from ecg_xai.harness import (
    ExperimentConfig,
    prepare_segments,
    run_experiment,
    run_iteration,
)
from ecg_xai.networks import ResNetConfig
from ecg_xai.preprocessing import process_recordings

# Narrow ResNet; the full-width ResNet50 is reserved for the corpus run.
SMALL_RESNET = ResNetConfig(blocks=(1, 1, 1, 1), base_width=8)

needs_chapman = pytest.mark.skipif(
    not os.environ.get(ENV_CHAPMAN_MANIFEST),
    reason=f"{ENV_CHAPMAN_MANIFEST} is not set",
)


@pytest.fixture(scope="module")
def synthetic_corpus():
    """Seeded synthetic segments, 30 patients per class."""
    return prepare_segments(ExperimentConfig(synthetic_patients=30, seed=0))


@pytest.mark.slow
@pytest.mark.parametrize(
    "config",
    [
        ExperimentConfig(architecture="vit"),
        ExperimentConfig(architecture="resnet", resnet=SMALL_RESNET),
    ],
    ids=["vit", "resnet"],
)
def test_synthetic_corpus_is_learned(synthetic_corpus, config):
    """Test both explainable networks separate the synthetic classes."""
    # Act: One iteration with the default training budget.
    result = run_iteration(synthetic_corpus, config, iteration=0)

    # Assert: Segment accuracy on held-out patients.
    assert result.segment_report.overall_accuracy >= 0.90
    assert result.averaged_maps


@pytest.mark.slow
def test_shuffled_labels_fall_to_chance():
    """Test permuting labels between patients removes what can be learned."""
    # Arrange: Control run averaged over three iterations.
    config = ExperimentConfig(architecture="vit", shuffle_labels=True, seed=4)
    shuffled = prepare_segments(config)

    # Act: Train and evaluate each iteration.
    accuracies = [
        run_iteration(shuffled, config, i).segment_report.overall_accuracy
        for i in range(3)
    ]

    # Assert: Chance level for three balanced classes.
    assert sum(accuracies) / len(accuracies) == pytest.approx(1 / 3, abs=0.15)


@pytest.mark.slow
def test_amplitude_helps_when_it_is_a_class_cue():
    """Test raw amplitudes do not score below z-normalized input."""
    # Arrange: Synthetic corpora for both normalizations.
    raw = ExperimentConfig(architecture="vit", seed=5)
    normalized = ExperimentConfig(architecture="vit", normalization="zscore", seed=5)

    # Act: One iteration each.
    raw_accuracy = run_iteration(
        prepare_segments(raw), raw, 0
    ).segment_report.overall_accuracy
    normalized_accuracy = run_iteration(
        prepare_segments(normalized), normalized, 0
    ).segment_report.overall_accuracy

    # Assert: Within noise of one test split.
    assert raw_accuracy >= normalized_accuracy - 0.02


@pytest.mark.dataset
@needs_chapman
def test_chapman_patient_counts():
    """Test the lead II export holds the expected patients per rhythm."""
    # Act: Ingest the manifest.
    recordings = ingest(os.environ[ENV_CHAPMAN_MANIFEST])

    # Assert: Patients per label.
    assert label_counts(recordings) == {"AFIB": 1654, "SB": 3765, "SR": 1789}


@pytest.mark.dataset
@needs_chapman
def test_chapman_segment_counts():
    """Test segment extraction yields the expected corpus size per rhythm."""
    # Arrange: Ingested export.
    recordings = ingest(os.environ[ENV_CHAPMAN_MANIFEST])

    # Act: Segment without normalization.
    segments, _ = process_recordings(recordings)

    # Assert: Within five percent; counts depend on the peak detector.
    counts = {label: 0 for label in ("AFIB", "SB", "SR")}
    for segment in segments:
        counts[segment.label] += 1
    assert counts["AFIB"] == pytest.approx(11310, rel=0.05)
    assert counts["SB"] == pytest.approx(14635, rel=0.05)
    assert counts["SR"] == pytest.approx(9642, rel=0.05)


@pytest.mark.dataset
@needs_chapman
@pytest.mark.parametrize(
    ("architecture", "expected"),
    [("resnet", 0.9613), ("vit", 0.9246)],
)
async def test_chapman_accuracy(tmp_path, architecture, expected):
    """Test five-iteration accuracy on the export without normalization."""
    # Arrange: Default experiment on the manifest.
    config = ExperimentConfig(
        architecture=architecture, manifest=os.environ[ENV_CHAPMAN_MANIFEST]
    )

    # Act: Run all iterations.
    result = await run_experiment(config, tmp_path / architecture)

    # Assert: Mean segment accuracy.
    mean, _ = result.overall_accuracy("segment")
    assert mean == pytest.approx(expected, abs=0.02)
