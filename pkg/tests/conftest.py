from pathlib import Path

import numpy as np
import pytest

from ecg_xai.const import LABELS, MAX_SEGMENT_LENGTH
from ecg_xai.models import RrrSegment
from ecg_xai.networks import CnnLstmConfig, ResNetConfig, ViTConfig
from ecg_xai.preprocessing import pad_segment, process_recordings
from ecg_xai.synthetic import generate_synthetic


@pytest.fixture
def rng():
    """Return a seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vit_config():
    """Return a one-layer ViT small enough for unit tests."""
    return ViTConfig(embed_dim=8, n_layers=1, n_heads=2, mlp_units=16, mlp_dropout=0.0)


@pytest.fixture
def tiny_resnet_config():
    """Return a four-stage ResNet with one narrow bottleneck per stage."""
    return ResNetConfig(
        blocks=(1, 1, 1, 1), base_width=4, head_dense_units=8, head_dropout=0.0
    )


@pytest.fixture
def tiny_cnn_lstm_config():
    """Return a CNN-LSTM with few filters and units."""
    return CnnLstmConfig(conv_filters=4, lstm_units=6, recurrent_dropout=0.0)


@pytest.fixture(scope="session")
def synthetic_recordings():
    """Four synthetic patients per class."""
    return generate_synthetic(n_patients=4, seed=7)


@pytest.fixture(scope="session")
def synthetic_segments(synthetic_recordings):
    """RRR segments of the small synthetic corpus."""
    segments, _ = process_recordings(synthetic_recordings)
    return segments


@pytest.fixture
def make_segment():
    """Factory for segments with a sine beat of a given length."""

    def _make(
        patient_id: str = "P1", label: str = "SR", length: int = 600, scale=1.0
    ) -> RrrSegment:
        samples = scale * np.sin(np.linspace(0, 2 * np.pi, length))
        return RrrSegment(
            patient_id=patient_id,
            label=label,
            original_length=length,
            padded=pad_segment(samples),
        )

    return _make


@pytest.fixture
def random_batch(rng):
    """Factory for random (B, 1500) inputs with random real lengths."""

    def _make(size: int = 2) -> tuple[np.ndarray, np.ndarray]:
        lengths = rng.integers(300, MAX_SEGMENT_LENGTH + 1, size=size)
        batch = rng.standard_normal((size, MAX_SEGMENT_LENGTH)).astype(np.float32)
        for row, length in enumerate(lengths):
            batch[row, length:] = 0.0
        return batch, lengths

    return _make


@pytest.fixture
def fixture_path():
    """Resolve a file under tests/fixtures."""

    def _resolve(name: str) -> Path:
        return Path(__file__).parent / "fixtures" / name

    return _resolve


@pytest.fixture
def labels():
    """Return the class labels in index order."""
    return list(LABELS)
