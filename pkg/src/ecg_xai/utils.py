"""Utility functions for the ECG explainability pipeline."""

import hashlib
import json
import os
import subprocess
import tempfile
from collections.abc import Iterator
from contextlib import contextmanager, suppress
from importlib import metadata
from pathlib import Path
from typing import IO, Any


def parse_cli_params(params_list: list[str]) -> dict[str, Any]:
    """Parse a list of CLI parameter strings into a dictionary.

    Supports two formats:
    1. Single JSON string: '{"training.epochs": 5}'
    2. Key-Value pairs: 'training.epochs=5' 'vit.mask_padding=true'

    Performs basic type inference for numbers and booleans.

    Args:
        params_list: List of strings from the command line (e.g. argparse nargs='*').

    Returns:
        Dictionary of parsed parameters.

    Raises:
        ValueError: If JSON parsing fails or format is invalid.
    """
    params = {}

    if not params_list:
        return params

    # Case 1: Single argument that looks like JSON
    if len(params_list) == 1 and params_list[0].strip().startswith("{"):
        try:
            return json.loads(params_list[0])
        except json.JSONDecodeError:
            raise ValueError(
                "Argument appears to be JSON but could not be parsed."
            ) from None

    # Case 2: Key=Value pairs
    for item in params_list:
        if "=" not in item:
            raise ValueError(f"Invalid argument format '{item}'. Expected key=value.")

        key, value_string = item.split("=", 1)

        # Type inference
        value = value_string
        if value_string.lower() == "true":
            value = True
        elif value_string.lower() == "false":
            value = False
        else:
            try:
                value = int(value_string)
            except ValueError:
                try:
                    value = float(value_string)
                except ValueError:
                    # Lists such as blocks=[1,1,1,1]
                    if value_string.startswith("[") or value_string.startswith("{"):
                        with suppress(json.JSONDecodeError):
                            value = json.loads(value_string)

        params[key] = value

    return params


def mask_patient_id(patient_id: str) -> str:
    """Mask a patient identifier for log output.

    Keeps the first two characters and a short stable digest so log lines of
    the same patient can still be correlated.

    Args:
        patient_id: The raw identifier.

    Returns:
        The masked identifier.
    """
    if not patient_id:
        return patient_id
    digest = hashlib.sha256(patient_id.encode("utf-8")).hexdigest()[:6]
    return f"{patient_id[:2]}***{digest}"


def config_hash(config: dict[str, Any]) -> str:
    """SHA-256 of the canonical (sorted-key) JSON form of a config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@contextmanager
def atomic_write(path: Path, mode: str = "w") -> Iterator[IO[Any]]:
    """Write a file through a temporary sibling and rename it into place.

    Args:
        path: Final destination.
        mode: 'w' for text, 'wb' for binary.

    Yields:
        The open temporary file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        encoding = None if "b" in mode else "utf-8"
        newline = None if "b" in mode else ""
        with os.fdopen(fd, mode, encoding=encoding, newline=newline) as file:
            yield file
        os.replace(tmp_name, path)
    except BaseException:
        with suppress(FileNotFoundError):
            os.unlink(tmp_name)
        raise


def version_string() -> str:
    """Return a git-describable version, falling back to the package version."""
    try:
        package_version = metadata.version("ecg_xai")
    except metadata.PackageNotFoundError:
        package_version = "0.0.0+unknown"

    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return package_version

    return f"{package_version}+{described}" if described else package_version
