"""Importance maps on a common 1500-sample axis.

ViT maps are the CLS query's attention row (CLS column dropped); ResNet maps
are Grad-CAM over the final convolutional activations. Maps of the real part
of a segment are scaled to [0, 1] and linearly interpolated onto
``MAX_SEGMENT_LENGTH`` points, together with the segment's own samples, so
that beats of different length can be averaged per label.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd

from .const import LABELS, MAX_SEGMENT_LENGTH, MIN_SEGMENT_LENGTH
from .exceptions import EcgContractError, EcgDataError
from .models import AveragedMap, HeatmapBundle, MapSource, Predicate, RrrSegment
from .networks import Network, ResNet1D, TrainedModel, VisionTransformer
from .tensor import Tape, Tensor, sum_
from .training import predict_logits, stack_segments
from .utils import atomic_write

_LOGGER = logging.getLogger(__name__)

HEATMAP_COLUMNS = [
    "label",
    "predicate",
    "source",
    "n_segments",
    "index",
    "mean_map",
    "mean_signal",
    "std_signal",
]


@dataclass(frozen=True)
class ExplainConfig:
    """Which maps to compute.

    Attributes:
        layer: Attention layer index, 'all' to average layers, or None for
            the final layer.
        head_reduction: 'none' keeps one map per head, 'mean' averages heads.
        batch_size: Segments per forward pass.
    """

    layer: int | Literal["all"] | None = None
    head_reduction: Literal["none", "mean"] = "none"
    batch_size: int = 64

    def __post_init__(self) -> None:
        """Check option values."""
        if self.head_reduction not in ("none", "mean"):
            raise EcgContractError(
                f"ExplainConfig: head_reduction must be 'none' or 'mean', "
                f"got '{self.head_reduction}'."
            )
        if isinstance(self.layer, str) and self.layer != "all":
            raise EcgContractError(
                f"ExplainConfig: layer must be an index or 'all', got '{self.layer}'."
            )
        if self.batch_size < 1:
            raise EcgContractError(
                f"ExplainConfig: batch_size must be positive, got {self.batch_size}."
            )


def _network(model: TrainedModel | Network) -> Network:
    return model.network if isinstance(model, TrainedModel) else model


def scale_unit(values: np.ndarray) -> np.ndarray:
    """Min-max scale into [0, 1]; a constant map becomes all zeros.

    Raises:
        EcgContractError: values is empty.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EcgContractError("scale_unit: empty map.")
    low = values.min()
    span = values.max() - low
    if span == 0 or not np.isfinite(span):
        return np.zeros_like(values)
    return (values - low) / span


def covering_positions(original_length: int, step: float, count: int) -> np.ndarray:
    """Sample coordinates of the map cells that cover a segment's real part.

    Cell i spans [i * step, (i + 1) * step) and sits at its center; only the
    ceil(original_length / step) cells touching real samples are returned,
    clipped into [0, original_length - 1].
    """
    covering = max(1, min(count, math.ceil(original_length / step)))
    centers = np.arange(covering) * step + (step - 1) / 2
    return np.clip(centers, 0, original_length - 1)


def resample_to_1500(
    values: np.ndarray,
    original_length: int,
    positions: np.ndarray | None = None,
) -> np.ndarray:
    """Linearly interpolate a map onto MAX_SEGMENT_LENGTH uniform points.

    The target points span the segment's duration [0, original_length - 1];
    values outside the known positions take the nearest end value, so
    nothing is extrapolated.

    Args:
        values: Map values.
        original_length: Real length of the segment (>= 2).
        positions: Sample coordinates of values; evenly spread over the
            segment when omitted.

    Raises:
        EcgContractError: original_length < 2, empty values or misaligned
            positions.
    """
    if original_length < MIN_SEGMENT_LENGTH:
        raise EcgContractError(
            f"resample_to_1500: original_length must be >= {MIN_SEGMENT_LENGTH}, "
            f"got {original_length}."
        )
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise EcgContractError("resample_to_1500: empty map.")
    if positions is None:
        positions = np.linspace(0.0, original_length - 1, values.size)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != values.shape:
        raise EcgContractError(
            f"resample_to_1500: {values.size} values but {positions.size} positions."
        )
    targets = np.linspace(0.0, original_length - 1, MAX_SEGMENT_LENGTH)
    return np.interp(targets, positions, values)


def _attention_rows(
    network: VisionTransformer, padded: np.ndarray, lengths: np.ndarray
) -> np.ndarray:
    """CLS query rows without the CLS column: (B, layers, heads, n_patches)."""
    was_training = network.training
    network.eval()
    try:
        _, attention = network.forward(padded, lengths, collect_attention=True)
    finally:
        network.train(was_training)
    return np.stack([weights[:, :, 0, 1:] for weights in attention], axis=1)


def _resolve_layer(network: VisionTransformer, layer: int | str | None) -> int | None:
    n_layers = network.config.n_layers
    if layer is None:
        return n_layers - 1
    if layer == "all":
        return None
    if not isinstance(layer, int) or not 0 <= layer < n_layers:
        raise EcgContractError(
            f"cls_attention_map: layer {layer} out of range [0, {n_layers})."
        )
    return layer


def _check_head(network: VisionTransformer, head: int | None) -> None:
    n_heads = network.config.n_heads
    if head is not None and not 0 <= head < n_heads:
        raise EcgContractError(
            f"cls_attention_map: head {head} out of range [0, {n_heads})."
        )


def _select(rows: np.ndarray, layer: int | None, head: int | None) -> np.ndarray:
    """Reduce (B, layers, heads, P) rows to (B, P)."""
    picked = rows.mean(axis=1) if layer is None else rows[:, layer]
    return picked.mean(axis=1) if head is None else picked[:, head]


def cls_attention_map(
    model: TrainedModel | VisionTransformer,
    segment: RrrSegment,
    layer: int | Literal["all"] | None = None,
    head: int | None = 0,
) -> np.ndarray:
    """Attention of the CLS token toward every patch.

    Args:
        model: A ViT (or a TrainedModel wrapping one).
        segment: The segment to explain.
        layer: Layer index, None for the final layer, 'all' for the mean
            over layers.
        head: Head index, or None for the mean over heads.

    Returns:
        Unscaled map of length n_patches (50 for the default config).

    Raises:
        EcgContractError: Not a ViT, or layer/head out of range.
    """
    network = _network(model)
    if not isinstance(network, VisionTransformer):
        raise EcgContractError(
            f"cls_attention_map: needs a ViT, got {type(network).__name__}."
        )
    resolved = _resolve_layer(network, layer)
    _check_head(network, head)
    padded, lengths, _ = stack_segments([segment])
    rows = _attention_rows(network, padded, lengths)
    return _select(rows, resolved, head)[0]


def grad_cam_maps(
    forward: Callable[[np.ndarray], tuple[Tensor, Tensor]],
    batch: np.ndarray,
    targets: np.ndarray,
) -> np.ndarray:
    """Grad-CAM for a batch given a forward returning (logits, activations).

    For each row, ReLU(sum_c alpha_c * A_c) with alpha_c the mean over
    positions of d logit[target] / d A_c. Rows must not interact in the
    forward pass (eval mode).

    Returns:
        Maps (B, positions).
    """
    targets = np.asarray(targets, dtype=np.int64)
    with Tape() as tape:
        logits, activations = forward(batch)
        picked = logits[np.arange(len(targets)), targets]
        score = sum_(picked)
        if score.tape is None:
            return np.zeros(activations.shape[:2])
        tape.backward(score)
    grads = activations.grad
    if grads is None:
        return np.zeros(activations.shape[:2])
    alphas = grads.mean(axis=1, keepdims=True)
    cam = (alphas * activations.data).sum(axis=2)
    return np.maximum(cam, 0.0).astype(np.float64)


def _resnet_cam(
    network: ResNet1D, padded: np.ndarray, targets: np.ndarray
) -> np.ndarray:
    was_training = network.training
    params = network.parameters()
    saved = [None if param.grad is None else param.grad.copy() for param in params]
    network.eval()
    try:
        return grad_cam_maps(
            lambda batch: network.forward(batch, collect_activations=True),
            padded,
            targets,
        )
    finally:
        # Gradients accumulated by the caller survive the explanation.
        for param, grad in zip(params, saved, strict=True):
            param.grad = grad
        network.train(was_training)


def grad_cam(
    model: TrainedModel | ResNet1D,
    segment: RrrSegment,
    target_class: int | None = None,
) -> np.ndarray:
    """Grad-CAM over the ResNet's final convolutional positions.

    Args:
        model: A ResNet (or a TrainedModel wrapping one).
        segment: The segment to explain.
        target_class: Class whose logit is explained; the predicted class
            when omitted.

    Returns:
        Nonnegative map of length ``config.final_length``.

    Raises:
        EcgContractError: The model has no convolutional activation tap.
    """
    network = _network(model)
    if not isinstance(network, ResNet1D):
        raise EcgContractError(
            f"grad_cam: needs a ResNet, got {type(network).__name__}."
        )
    padded, lengths, _ = stack_segments([segment])
    if target_class is None:
        target_class = int(predict_logits(network, padded, lengths).argmax(axis=1)[0])
    if not 0 <= target_class < network.config.n_classes:
        raise EcgContractError(f"grad_cam: target_class {target_class} out of range.")
    return _resnet_cam(network, padded, np.array([target_class]))[0]


def _make_bundle(
    source: MapSource,
    raw_map: np.ndarray,
    positions: np.ndarray,
    segment: RrrSegment,
    predicted: str,
) -> HeatmapBundle:
    covered = scale_unit(raw_map[: len(positions)])
    return HeatmapBundle(
        source=source,
        raw_map=raw_map,
        resampled_map=resample_to_1500(covered, segment.original_length, positions),
        resampled_signal=resample_to_1500(segment.samples, segment.original_length),
        patient_id=segment.patient_id,
        label=segment.label,
        predicted=predicted,
        original_length=segment.original_length,
    )


def explain_segments(
    model: TrainedModel | Network,
    segments: Sequence[RrrSegment],
    config: ExplainConfig | None = None,
    predicted: np.ndarray | None = None,
) -> list[HeatmapBundle]:
    """Heatmap bundles for every segment.

    ViT models give one bundle per head of the selected layer (or one per
    segment with head_reduction 'mean'); ResNet models give one Grad-CAM
    bundle per segment for the predicted class.

    Args:
        model: Trained ViT or ResNet.
        segments: Segments to explain.
        config: Map selection; defaults to ExplainConfig().
        predicted: Predicted class indices; computed when omitted.

    Raises:
        EcgContractError: The architecture has no explainability tap.
    """
    config = config or ExplainConfig()
    network = _network(model)
    if not isinstance(network, VisionTransformer | ResNet1D):
        raise EcgContractError(
            f"explain_segments: no importance map for {type(network).__name__}."
        )
    if not segments:
        return []
    padded, lengths, _ = stack_segments(segments)
    if predicted is None:
        predicted = predict_logits(network, padded, lengths).argmax(axis=1)
    predicted = np.asarray(predicted, dtype=np.int64)

    bundles: list[HeatmapBundle] = []
    for start in range(0, len(segments), config.batch_size):
        rows = slice(start, start + config.batch_size)
        chunk = segments[rows]
        if isinstance(network, VisionTransformer):
            layer = _resolve_layer(network, config.layer)
            heads: list[int | None] = (
                [None]
                if config.head_reduction == "mean"
                else list(range(network.config.n_heads))
            )
            attention = _attention_rows(network, padded[rows], lengths[rows])
            step = network.config.patch_size
            for head in heads:
                source = MapSource("attention", layer=layer, head=head)
                maps = _select(attention, layer, head)
                guesses = predicted[rows]
                for segment, raw, guess in zip(chunk, maps, guesses, strict=True):
                    positions = covering_positions(
                        segment.original_length, step, len(raw)
                    )
                    bundles.append(
                        _make_bundle(source, raw, positions, segment, LABELS[guess])
                    )
        else:
            maps = _resnet_cam(network, padded[rows], predicted[rows])
            step = network.config.input_len / maps.shape[1]
            source = MapSource("gradcam")
            for segment, raw, guess in zip(chunk, maps, predicted[rows], strict=True):
                positions = covering_positions(segment.original_length, step, len(raw))
                bundles.append(
                    _make_bundle(source, raw, positions, segment, LABELS[guess])
                )
    _LOGGER.debug(
        "Built %d heatmap bundles for %d segments", len(bundles), len(segments)
    )
    return bundles


def average_maps(
    bundles: Sequence[HeatmapBundle],
    label: str,
    predicate: Predicate = "correct",
    source: MapSource | None = None,
) -> AveragedMap | None:
    """Pointwise mean map and signal mean/std of the selected bundles.

    Selects bundles of the given true label whose prediction is correct (or
    misclassified) and, when given, of one source.

    Returns:
        The averaged map, or None when nothing matches.

    Raises:
        EcgContractError: Selected bundles mix sources or lengths.
    """
    want_correct = predicate == "correct"
    selected = [
        bundle
        for bundle in bundles
        if bundle.label == label
        and bundle.is_correct == want_correct
        and (source is None or bundle.source == source)
    ]
    if not selected:
        return None
    sources = {bundle.source for bundle in selected}
    if len(sources) > 1:
        raise EcgContractError(
            f"average_maps: bundles mix sources {sorted(s.name for s in sources)}."
        )
    if len({bundle.resampled_map.shape for bundle in selected}) > 1:
        raise EcgContractError("average_maps: bundles have different lengths.")

    maps = np.stack([bundle.resampled_map for bundle in selected])
    signals = np.stack([bundle.resampled_signal for bundle in selected])
    return AveragedMap(
        label=label,
        predicate=predicate,
        source=selected[0].source,
        mean_map=maps.mean(axis=0),
        mean_signal=signals.mean(axis=0),
        std_signal=signals.std(axis=0),
        n_segments=len(selected),
    )


def average_all(
    bundles: Sequence[HeatmapBundle],
    labels: Sequence[str] = LABELS,
    predicates: Sequence[Predicate] = ("correct",),
) -> list[AveragedMap]:
    """AveragedMap for every (label, predicate, source) with members."""
    sources = list(dict.fromkeys(bundle.source for bundle in bundles))
    averaged = []
    for label in labels:
        for predicate in predicates:
            for source in sources:
                result = average_maps(bundles, label, predicate, source)
                if result is not None:
                    averaged.append(result)
    return averaged


def averaged_maps_frame(maps: Sequence[AveragedMap]) -> pd.DataFrame:
    """Long table with one row per map and sample index."""
    frames = [
        pd.DataFrame(
            {
                "label": item.label,
                "predicate": item.predicate,
                "source": item.source.name,
                "n_segments": item.n_segments,
                "index": np.arange(len(item.mean_map)),
                "mean_map": item.mean_map,
                "mean_signal": item.mean_signal,
                "std_signal": item.std_signal,
            }
        )
        for item in maps
    ]
    if not frames:
        return pd.DataFrame(columns=HEATMAP_COLUMNS)
    return pd.concat(frames, ignore_index=True)[HEATMAP_COLUMNS]


def export_averaged_maps(maps: Sequence[AveragedMap], path: Path) -> Path:
    """Write averaged maps as CSV (atomically)."""
    with atomic_write(Path(path)) as file:
        averaged_maps_frame(maps).to_csv(file, index=False, float_format="%.9g")
    return Path(path)


def load_averaged_maps(path: Path) -> list[AveragedMap]:
    """Read maps written by :func:`export_averaged_maps`.

    Raises:
        EcgDataError: The file is missing or lacks the expected columns.
    """
    path = Path(path)
    if not path.is_file():
        raise EcgDataError(f"Heatmap file {path} not found.", error_id="heatmaps")
    frame = pd.read_csv(path)
    missing = sorted(set(HEATMAP_COLUMNS) - set(frame.columns))
    if missing:
        raise EcgDataError(f"{path} is missing columns {missing}.", error_id="heatmaps")
    maps = []
    for (label, predicate, source), group in frame.groupby(
        ["label", "predicate", "source"], sort=False
    ):
        group = group.sort_values("index")
        maps.append(
            AveragedMap(
                label=str(label),
                predicate=predicate,
                source=MapSource.from_name(str(source)),
                mean_map=group["mean_map"].to_numpy(dtype=np.float64),
                mean_signal=group["mean_signal"].to_numpy(dtype=np.float64),
                std_signal=group["std_signal"].to_numpy(dtype=np.float64),
                n_segments=int(group["n_segments"].iloc[0]),
            )
        )
    return maps
