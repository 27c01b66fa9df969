"""Experiment config files (TOML or JSON) and dotted overrides."""

from __future__ import annotations

import copy
import json
import logging
import tomllib
from dataclasses import fields, replace
from pathlib import Path
from typing import Any

from .dataset import resolve_data_path
from .exceptions import EcgInvalidInputError
from .explain import ExplainConfig
from .harness import ExperimentConfig, default_vit_layers
from .networks import CnnLstmConfig, ResNetConfig, ViTConfig
from .synthetic import ClassTemplate, SyntheticSpec, default_templates
from .training import TrainingConfig

_LOGGER = logging.getLogger(__name__)

SECTIONS: dict[str, type] = {
    "vit": ViTConfig,
    "resnet": ResNetConfig,
    "cnn_lstm": CnnLstmConfig,
    "training": TrainingConfig,
    "explain": ExplainConfig,
    "synthetic": SyntheticSpec,
}


def _field_names(cls: type) -> set[str]:
    return {item.name for item in fields(cls)}


def _check_keys(table: dict[str, Any], cls: type, where: str) -> None:
    unknown = sorted(set(table) - _field_names(cls))
    if unknown:
        raise EcgInvalidInputError(
            f"Unknown config key(s) {', '.join(f'{where}{key}' for key in unknown)}.",
            error_id="config",
        )


def _build_templates(table: dict[str, Any]) -> dict[str, ClassTemplate]:
    templates = default_templates()
    for label, values in table.items():
        if label not in templates:
            raise EcgInvalidInputError(
                f"Unknown config key synthetic.templates.{label}.", error_id="config"
            )
        if isinstance(values, ClassTemplate):
            templates[label] = values
            continue
        _check_keys(values, ClassTemplate, f"synthetic.templates.{label}.")
        templates[label] = replace(templates[label], **values)
    return templates


def _build_section(name: str, table: dict[str, Any]) -> Any:
    cls = SECTIONS[name]
    if not isinstance(table, dict):
        raise EcgInvalidInputError(
            f"Config section [{name}] must be a table.", error_id="config"
        )
    _check_keys(table, cls, f"{name}.")
    values = dict(table)
    if name == "synthetic" and "templates" in values:
        values["templates"] = _build_templates(values["templates"])
    if name == "resnet" and "blocks" in values:
        values["blocks"] = tuple(values["blocks"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise EcgInvalidInputError(
            f"Invalid values in config section [{name}]: {err}", error_id="config"
        ) from err


def experiment_config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from plain nested values.

    Raises:
        EcgInvalidInputError: Unknown keys or values of the wrong type.
    """
    _check_keys(data, ExperimentConfig, "")
    values: dict[str, Any] = {}
    for key, value in data.items():
        if key == "vit" and isinstance(value, dict) and "n_layers" not in value:
            depth = default_vit_layers(data.get("normalization", "none"))
            values[key] = _build_section(key, {"n_layers": depth, **value})
        elif key in SECTIONS:
            values[key] = _build_section(key, value)
        elif key in ("ratios", "explain_predicates"):
            values[key] = tuple(value)
        else:
            values[key] = value
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as err:
        raise EcgInvalidInputError(
            f"Invalid experiment config: {err}", error_id="config"
        ) from err


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    """Read an experiment config file.

    ``.toml`` files are parsed with tomllib, ``.json`` files with json. Top
    level keys are ExperimentConfig fields; the tables ``[vit]``,
    ``[resnet]``, ``[cnn_lstm]``, ``[training]``, ``[explain]`` and
    ``[synthetic]`` (with optional ``[synthetic.templates.<LABEL>]``) set the
    nested configs. Missing keys keep their defaults.

    Raises:
        EcgInvalidInputError: Missing or unparsable file, unknown key.
    """
    path = Path(path)
    if not path.is_file():
        raise EcgInvalidInputError(f"Config file {path} not found.", error_id="config")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".toml":
            data = tomllib.loads(text)
        elif path.suffix == ".json":
            data = json.loads(text)
        else:
            raise EcgInvalidInputError(
                f"Config file {path} must end in .toml or .json.", error_id="config"
            )
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as err:
        raise EcgInvalidInputError(
            f"Cannot parse config file {path}: {err}", error_id="config"
        ) from err
    for key in ("manifest", "segment_cache"):
        if isinstance(data.get(key), str):
            data[key] = str(resolve_data_path(data[key], base=path.parent))
    config = experiment_config_from_dict(data)
    _LOGGER.debug("Loaded config %s (hash %s)", path, config.config_hash[:12])
    return config


def apply_overrides(
    config: ExperimentConfig, overrides: dict[str, Any]
) -> ExperimentConfig:
    """Return a copy of config with dotted-key overrides applied.

    Keys address fields through their sections, for example
    ``training.epochs`` or ``synthetic.templates.SR.heart_rate_bpm``.

    Raises:
        EcgInvalidInputError: A key does not name an existing field.
    """
    if not overrides:
        return config
    data = copy.deepcopy(config.to_dict())
    if "normalization" in overrides and "vit.n_layers" not in overrides:
        # Follow the depth default unless the depth was chosen explicitly.
        if config.vit.n_layers == default_vit_layers(config.normalization):
            data["vit"]["n_layers"] = default_vit_layers(overrides["normalization"])
    for key, value in overrides.items():
        *parents, leaf = key.split(".")
        node = data
        for part in parents:
            if not isinstance(node.get(part), dict):
                raise EcgInvalidInputError(
                    f"Unknown config key {key}.", error_id="config"
                )
            node = node[part]
        if leaf not in node:
            raise EcgInvalidInputError(f"Unknown config key {key}.", error_id="config")
        node[leaf] = value
        _LOGGER.debug("Override %s=%r", key, value)
    return experiment_config_from_dict(data)
