"""Constants for the ECG explainability pipeline."""

# Recordings
SAMPLE_RATE_HZ: int = 500
RECORDING_SECONDS: int = 10
RECORDING_LENGTH: int = SAMPLE_RATE_HZ * RECORDING_SECONDS
DEFAULT_LEAD: str = "II"
LEADS: tuple[str, ...] = (
    "I",
    "II",
    "III",
    "aVR",
    "aVL",
    "aVF",
    "V1",
    "V2",
    "V3",
    "V4",
    "V5",
    "V6",
)

# Labels (order fixes the class index used by every model)
LABELS: tuple[str, ...] = ("AFIB", "SB", "SR")
LABEL_TO_INDEX: dict[str, int] = {label: index for index, label in enumerate(LABELS)}
N_CLASSES: int = len(LABELS)

# Cleaning
HIGHPASS_CUTOFF_HZ: float = 0.5
HIGHPASS_ORDER: int = 5
POWERLINE_CHOICES: tuple[int, ...] = (50, 60)
DEFAULT_POWERLINE_HZ: int = 50
NOTCH_QUALITY: float = 30.0
TRANSIENT_SECONDS: float = 0.5

# Peak detection
REFRACTORY_SECONDS: float = 0.2
QRS_BAND_HZ: tuple[float, float] = (5.0, 15.0)
INTEGRATION_SECONDS: float = 0.15

# Segments
MAX_SEGMENT_LENGTH: int = 1500
MIN_SEGMENT_LENGTH: int = 2
MIN_PEAKS_FOR_SEGMENT: int = 3

# Splitting
DEFAULT_SPLIT_RATIOS: tuple[float, float, float] = (0.70, 0.15, 0.15)
MIN_PATIENTS_PER_CLASS: int = 3

# Environment
ENV_DATA_DIR: str = "ECG_XAI_DATA_DIR"
ENV_CHAPMAN_MANIFEST: str = "ECG_XAI_CHAPMAN_MANIFEST"

# Run directory artifacts
RUN_MANIFEST: str = "run.json"
METRICS_SEGMENT_CSV: str = "metrics_segment.csv"
METRICS_PATIENT_CSV: str = "metrics_patient.csv"
METRICS_SUMMARY_CSV: str = "metrics_summary.csv"
CONFUSION_CSV: str = "confusion.csv"
HISTORY_CSV: str = "history.csv"
SEGMENT_CACHE: str = "segments.npz"
CHECKPOINT_DIR: str = "checkpoints"
HEATMAP_DIR: str = "heatmaps"
HEATMAP_CSV: str = "averaged_maps.csv"
CHECKPOINT_PARAMS: str = "params.npz"
CHECKPOINT_MANIFEST: str = "manifest.json"
HISTOGRAM_CSV: str = "length_histogram.csv"
SPLIT_JSON: str = "split.json"
