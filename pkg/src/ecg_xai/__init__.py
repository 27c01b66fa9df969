"""Explainable single-lead ECG classification."""

from .config import apply_overrides, load_experiment_config
from .dataset import group_shuffle_split, ingest
from .exceptions import (
    EcgContractError,
    EcgDataError,
    EcgDegenerateSignalError,
    EcgDivergenceError,
    EcgError,
    EcgExperimentError,
    EcgInvalidInputError,
)
from .explain import average_maps, cls_attention_map, grad_cam, resample_to_1500
from .harness import ExperimentConfig, run_experiment
from .metrics import compute_metrics, patient_majority_vote
from .models import EcgRecording, RrrSegment
from .networks import TrainedModel, load_checkpoint, save_checkpoint
from .preprocessing import clean_signal, detect_r_peaks, extract_rrr_segments
from .synthetic import SyntheticSpec, generate_synthetic
from .training import train_model

__all__ = [
    "EcgContractError",
    "EcgDataError",
    "EcgDegenerateSignalError",
    "EcgDivergenceError",
    "EcgError",
    "EcgExperimentError",
    "EcgInvalidInputError",
    "EcgRecording",
    "ExperimentConfig",
    "RrrSegment",
    "SyntheticSpec",
    "TrainedModel",
    "apply_overrides",
    "average_maps",
    "clean_signal",
    "cls_attention_map",
    "compute_metrics",
    "detect_r_peaks",
    "extract_rrr_segments",
    "generate_synthetic",
    "grad_cam",
    "group_shuffle_split",
    "ingest",
    "load_checkpoint",
    "load_experiment_config",
    "patient_majority_vote",
    "resample_to_1500",
    "run_experiment",
    "save_checkpoint",
    "train_model",
]
