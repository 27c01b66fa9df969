"""One-versus-rest classification metrics at segment and patient level."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import fields

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, roc_auc_score

from .const import LABEL_TO_INDEX, LABELS, N_CLASSES
from .exceptions import EcgContractError
from .models import LabelMetrics, Level, MetricsReport, RrrSegment

_LOGGER = logging.getLogger(__name__)

METRIC_NAMES: tuple[str, ...] = (
    "accuracy",
    "specificity",
    "sensitivity",
    "precision",
    "f1",
    "auc",
)


def _ratio(numerator: float, denominator: float) -> float:
    return float(numerator / denominator) if denominator else 0.0


def _as_indices(labels: Sequence[str | int] | np.ndarray) -> np.ndarray:
    array = np.asarray(labels)
    if array.dtype.kind in "iu":
        indices = array.astype(np.int64)
    else:
        try:
            indices = np.array([LABEL_TO_INDEX[str(label)] for label in array])
        except KeyError as err:
            raise EcgContractError(f"compute_metrics: unknown label {err}.") from None
    if indices.size and (indices.min() < 0 or indices.max() >= N_CLASSES):
        raise EcgContractError("compute_metrics: label index out of range.")
    return indices.astype(np.int64)


def compute_metrics(
    probabilities: np.ndarray,
    true_labels: Sequence[str | int] | np.ndarray,
    level: Level = "segment",
    predicted: np.ndarray | None = None,
) -> MetricsReport:
    """Per-label one-versus-rest metrics, overall accuracy and confusion matrix.

    Args:
        probabilities: (N, 3) rows summing to 1.
        true_labels: Label names or class indices.
        level: Reported level tag.
        predicted: Predicted class indices; argmax of probabilities when
            omitted (patient level passes the majority vote).

    Returns:
        The report. Ratios with an empty denominator are 0.0; AUC is NaN for
        a label that is absent or the only one present.

    Raises:
        EcgContractError: Shapes disagree, rows do not sum to 1 or there is
            nothing to score.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    truth = _as_indices(true_labels)
    if probabilities.ndim != 2 or probabilities.shape != (len(truth), N_CLASSES):
        raise EcgContractError(
            f"compute_metrics: probabilities {probabilities.shape} do not match "
            f"{len(truth)} labels x {N_CLASSES} classes."
        )
    if len(truth) == 0:
        raise EcgContractError("compute_metrics: nothing to score.")
    if not np.allclose(probabilities.sum(axis=1), 1.0, atol=1e-6):
        raise EcgContractError("compute_metrics: probability rows must sum to 1.")
    guesses = (
        probabilities.argmax(axis=1)
        if predicted is None
        else _as_indices(np.asarray(predicted))
    )
    if guesses.shape != truth.shape:
        raise EcgContractError(
            f"compute_metrics: {len(guesses)} predictions for {len(truth)} labels."
        )

    confusion = confusion_matrix(truth, guesses, labels=list(range(N_CLASSES)))
    total = len(truth)
    per_label: dict[str, LabelMetrics] = {}
    for index, label in enumerate(LABELS):
        tp = int(confusion[index, index])
        fn = int(confusion[index].sum()) - tp
        fp = int(confusion[:, index].sum()) - tp
        tn = total - tp - fn - fp
        precision = _ratio(tp, tp + fp)
        sensitivity = _ratio(tp, tp + fn)
        member = truth == index
        auc = (
            float(roc_auc_score(member, probabilities[:, index]))
            if 0 < member.sum() < total
            else float("nan")
        )
        per_label[label] = LabelMetrics(
            accuracy=_ratio(tp + tn, total),
            specificity=_ratio(tn, tn + fp),
            sensitivity=sensitivity,
            precision=precision,
            f1=_ratio(2 * precision * sensitivity, precision + sensitivity),
            auc=auc,
            support=tp + fn,
        )

    report = MetricsReport(
        level=level,
        per_label=per_label,
        overall_accuracy=float((guesses == truth).mean()),
        confusion=confusion,
        n_samples=total,
    )
    _LOGGER.debug(
        "%s-level accuracy %.4f over %d items", level, report.overall_accuracy, total
    )
    return report


def patient_majority_vote(
    patient_ids: Sequence[str],
    probabilities: np.ndarray,
    predicted: np.ndarray | None = None,
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Majority vote of segment predictions per patient.

    Ties go to the tied label with the highest mean probability, then to the
    lowest class index.

    Args:
        patient_ids: Patient of each segment.
        probabilities: Segment probabilities (N, 3).
        predicted: Segment predictions; argmax of probabilities when omitted.

    Returns:
        Patients in first-seen order, their voted class indices and their
        mean probability vectors (P, 3).
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    guesses = (
        probabilities.argmax(axis=1) if predicted is None else np.asarray(predicted)
    )
    if len(patient_ids) != len(probabilities) or len(guesses) != len(probabilities):
        raise EcgContractError(
            f"patient_majority_vote: {len(patient_ids)} patients, "
            f"{len(probabilities)} probability rows, {len(guesses)} predictions."
        )

    order = list(dict.fromkeys(patient_ids))
    position = {patient: index for index, patient in enumerate(order)}
    rows = np.array([position[patient] for patient in patient_ids], dtype=np.int64)
    votes = np.zeros((len(order), N_CLASSES), dtype=np.int64)
    np.add.at(votes, (rows, guesses.astype(np.int64)), 1)
    sums = np.zeros((len(order), N_CLASSES))
    np.add.at(sums, rows, probabilities)
    means = sums / np.bincount(rows, minlength=len(order))[:, None]

    voted = np.empty(len(order), dtype=np.int64)
    for index in range(len(order)):
        tied = np.flatnonzero(votes[index] == votes[index].max())
        # argmax returns the first (lowest) index among equal means
        voted[index] = tied[np.argmax(means[index, tied])]
    return order, voted, means


def patient_level_metrics(
    segments: Sequence[RrrSegment], probabilities: np.ndarray
) -> MetricsReport:
    """Metrics over patients: voted labels, mean probabilities for AUC."""
    patients, voted, means = patient_majority_vote(
        [segment.patient_id for segment in segments], probabilities
    )
    label_of = {segment.patient_id: segment.label for segment in segments}
    truth = [label_of[patient] for patient in patients]
    return compute_metrics(means, truth, level="patient", predicted=voted)


def segment_level_metrics(
    segments: Sequence[RrrSegment], probabilities: np.ndarray
) -> MetricsReport:
    """Metrics over segments with argmax predictions."""
    return compute_metrics(
        probabilities, [segment.label for segment in segments], level="segment"
    )


def confusion_frame(report: MetricsReport) -> pd.DataFrame:
    """Confusion matrix in long form: level, true, predicted, count."""
    rows = [
        {
            "level": report.level,
            "true": true_label,
            "predicted": predicted_label,
            "count": int(report.confusion[i, j]),
        }
        for i, true_label in enumerate(LABELS)
        for j, predicted_label in enumerate(LABELS)
    ]
    return pd.DataFrame(rows)


def average_reports(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Mean and standard deviation of per-label metrics over iterations.

    Args:
        frames: ``MetricsReport.to_frame()`` outputs, one per iteration.

    Returns:
        One row per (level, label) with ``<metric>_mean`` and ``<metric>_std``
        columns plus the mean overall accuracy. NaN AUCs are skipped.
    """
    if not frames:
        return pd.DataFrame()
    stacked = pd.concat(frames, ignore_index=True)
    value_columns = [*METRIC_NAMES, "overall_accuracy"]
    grouped = stacked.groupby(["level", "label"], sort=False)[value_columns]
    means = grouped.mean().add_suffix("_mean")
    stds = grouped.std(ddof=0).add_suffix("_std")
    summary = pd.concat([means, stds], axis=1).reset_index()
    summary["iterations"] = len(frames)
    return summary


def report_to_dict(report: MetricsReport) -> dict[str, object]:
    """JSON-friendly form of a report (NaN AUC becomes None)."""
    per_label = {}
    for label, metrics in report.per_label.items():
        values = {field.name: getattr(metrics, field.name) for field in fields(metrics)}
        if np.isnan(values["auc"]):
            values["auc"] = None
        per_label[label] = values
    return {
        "level": report.level,
        "overall_accuracy": report.overall_accuracy,
        "n_samples": report.n_samples,
        "per_label": per_label,
        "confusion": report.confusion.tolist(),
    }
