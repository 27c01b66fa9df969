"""Exceptions for the ECG explainability pipeline."""

from pathlib import Path
from typing import Any


class EcgError(Exception):
    """Base class for all pipeline errors."""

    default_error_id = "ecg"

    def __init__(self, message: str, error_id: str | None = None) -> None:
        """Initialize the error.

        Args:
            message: The error message.
            error_id: Optional machine-parsable error code.
        """
        super().__init__(message)
        self.error_id = error_id or self.default_error_id


class EcgInvalidInputError(EcgError):
    """Input values outside what an operation accepts (non-finite, unknown)."""

    default_error_id = "invalid-input"


class EcgDegenerateSignalError(EcgError):
    """Signal without variation where a scale is required."""

    default_error_id = "degenerate-signal"


class EcgContractError(EcgError):
    """Caller broke an operation's precondition (shapes, ranges, sizes)."""

    default_error_id = "contract"


class EcgDataError(EcgError):
    """Malformed manifest or recording files."""

    default_error_id = "data"

    def __init__(
        self,
        message: str,
        error_id: str | None = None,
        row_errors: list[dict[str, Any]] | None = None,
    ) -> None:
        """Initialize data error.

        Args:
            message: The error message.
            error_id: Optional machine-parsable error code.
            row_errors: Per-row issues, each with 'line' and 'message'.
        """
        detailed_msg = message
        if row_errors:
            details = "; ".join(
                f"line {error.get('line')}: {error.get('message')}"
                for error in row_errors
            )
            detailed_msg = f"{message}: {details}"

        super().__init__(detailed_msg, error_id)
        self.row_errors = row_errors or []


class EcgDivergenceError(EcgError):
    """Training loss became NaN or infinite."""

    default_error_id = "divergence"

    def __init__(self, message: str, epoch: int, batch: int) -> None:
        """Initialize divergence error.

        Args:
            message: The error message.
            epoch: Epoch index where the loss diverged.
            batch: Batch index within the epoch.
        """
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class EcgExperimentError(EcgError):
    """An experiment iteration aborted; completed artifacts stay on disk."""

    default_error_id = "experiment"

    def __init__(
        self, message: str, run_dir: Path, completed_iterations: list[int]
    ) -> None:
        """Initialize experiment error.

        Args:
            message: The error message.
            run_dir: Run directory holding the partial artifacts.
            completed_iterations: Iterations that finished before the failure.
        """
        super().__init__(message)
        self.run_dir = run_dir
        self.completed_iterations = completed_iterations
