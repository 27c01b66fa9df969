"""SVG figures for averaged heatmaps, segment lengths and training curves."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .const import SAMPLE_RATE_HZ  # noqa: E402
from .explain import scale_unit  # noqa: E402
from .models import AveragedMap, LengthHistogram  # noqa: E402
from .utils import atomic_write  # noqa: E402

_LOGGER = logging.getLogger(__name__)

# Stable element ids and no timestamp keep repeated renders byte-identical.
_SVG_RC = {"svg.hashsalt": "ecg-xai", "svg.fonttype": "none"}
_SVG_METADATA = {"Date": None, "Creator": None}


def _save(fig: plt.Figure, path: Path) -> Path:
    path = Path(path)
    with atomic_write(path, "wb") as file:
        fig.savefig(file, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    _LOGGER.debug("Wrote figure %s", path)
    return path


def plot_averaged_map(averaged: AveragedMap, path: Path) -> Path:
    """Mean signal with a +-1 std band over the heatmap as background intensity.

    The heatmap is rescaled to [0, 1] for display.
    """
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(8, 3.5))
        index = np.arange(len(averaged.mean_signal))
        low = averaged.mean_signal - averaged.std_signal
        high = averaged.mean_signal + averaged.std_signal
        span = float(high.max() - low.min()) or 1.0
        bottom = float(low.min()) - 0.05 * span
        top = float(high.max()) + 0.05 * span

        image = ax.imshow(
            scale_unit(averaged.mean_map)[None, :],
            aspect="auto",
            cmap="Reds",
            vmin=0.0,
            vmax=1.0,
            alpha=0.7,
            extent=(0, len(index) - 1, bottom, top),
            interpolation="nearest",
        )
        ax.fill_between(index, low, high, color="0.6", alpha=0.5, linewidth=0)
        ax.plot(index, averaged.mean_signal, color="black", linewidth=1.0)
        ax.set_xlim(0, len(index) - 1)
        ax.set_ylim(bottom, top)
        ax.set_xlabel("Resampled position")
        ax.set_ylabel("Amplitude")
        ax.set_title(
            f"{averaged.label} ({averaged.predicate}, {averaged.source.name}, "
            f"n={averaged.n_segments})"
        )
        fig.colorbar(image, ax=ax, label="Importance")
        fig.tight_layout()
        return _save(fig, path)


def plot_length_histogram(histogram: LengthHistogram, path: Path) -> Path:
    """Percentage of segments per length bin and label, lengths in seconds."""
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        edges = histogram.bin_edges / SAMPLE_RATE_HZ
        for label in histogram.counts:
            ax.stairs(histogram.percentages(label), edges, label=label)
        ax.set_xlabel("RRR segment length (s)")
        ax.set_ylabel("Segments (%)")
        if histogram.counts:
            ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_history(history: pd.DataFrame, path: Path) -> Path:
    """Training and validation loss and accuracy per epoch."""
    with plt.rc_context(_SVG_RC):
        fig, (loss_ax, acc_ax) = plt.subplots(1, 2, figsize=(9, 3.5))
        for column, style in (("train", "-"), ("val", "--")):
            loss_ax.plot(
                history["epoch"], history[f"{column}_loss"], style, label=column
            )
            acc_ax.plot(
                history["epoch"], history[f"{column}_accuracy"], style, label=column
            )
        loss_ax.set_xlabel("Epoch")
        loss_ax.set_ylabel("Loss")
        acc_ax.set_xlabel("Epoch")
        acc_ax.set_ylabel("Accuracy")
        acc_ax.legend()
        fig.tight_layout()
        return _save(fig, path)
