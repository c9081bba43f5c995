"""TOML experiment configs.

Sections map onto the dataclasses of the simulator::

    [cohort]      DriftConfig   (required section)
    [model]       ModelSpec     (in/out dims and n_comp are filled in)
    [train]       TrainConfig
    [gmm]         GmmConfig
    [meta]        MetaConfig
    [experiment]  method, rounds, seed, mode, payload, sketch_dim
"""
from __future__ import annotations

import dataclasses
import hashlib
import sys
from pathlib import Path
from typing import Any, Dict, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adapters import ModelSpec, TrainConfig
from .federation import DriftConfig, ExperimentConfig, GmmConfig, MetaConfig, make_config

REQUIRED = {
    "cohort": ("clients", "time_steps", "patients_per_client", "samples_per_patient",
               "input_dim", "drift_kind", "drift_magnitude"),
}
SECTIONS = {"cohort": DriftConfig, "model": ModelSpec, "train": TrainConfig,
            "gmm": GmmConfig, "meta": MetaConfig}
EXPERIMENT_KEYS = ("method", "rounds", "seed", "mode", "payload", "sketch_dim")
DERIVED_MODEL_KEYS = ("in_dim", "out_dim", "n_comp")


class ConfigError(ValueError):
    """Malformed or incomplete experiment config; the message names the field."""


def config_digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _build(section: str, cls, values: Dict[str, Any]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in fields or (section == "model" and key in DERIVED_MODEL_KEYS):
            raise ConfigError(f"unknown field '{section}.{key}'")
    kwargs = {}
    for key, value in values.items():
        default = fields[key].default
        if isinstance(default, bool) or isinstance(value, bool):
            ok = isinstance(value, bool) and isinstance(default, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int)
        elif isinstance(default, float) or default is None:
            ok = isinstance(value, (int, float))
            value = float(value) if ok else value
        elif isinstance(default, str):
            ok = isinstance(value, str)
        elif isinstance(default, tuple):
            ok = isinstance(value, list)
            value = tuple(value) if ok else value
        else:
            ok = True
        if not ok:
            raise ConfigError(f"field '{section}.{key}' has the wrong type ({type(value).__name__})")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"section [{section}]: {exc}") from None


def parse_config(raw: bytes, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{source}: not UTF-8 ({exc})") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for name in doc:
        if name not in SECTIONS and name != "experiment":
            raise ConfigError(f"{source}: unknown section [{name}]")
    for section, keys in REQUIRED.items():
        if section not in doc:
            raise ConfigError(f"{source}: missing required section [{section}]")
        for key in keys:
            if key not in doc[section]:
                raise ConfigError(f"{source}: missing required field '{section}.{key}'")
    parts = {name: _build(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()}
    exp = dict(doc.get("experiment", {}))
    for key in exp:
        if key not in EXPERIMENT_KEYS:
            raise ConfigError(f"{source}: unknown field 'experiment.{key}'")
    try:
        return make_config(cohort=parts["cohort"], model=parts["model"], train=parts["train"],
                           gmm=parts["gmm"], meta=parts["meta"], **exp)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: [experiment]: {exc}") from None


def load_config(path) -> Tuple[ExperimentConfig, bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(raw, str(path)), raw
