"""Run configuration: JSON document with embedded defaults, schema-validated.

A config has sections {dataset, model, train, distill, eval} plus a root
``seed``. Every key has a default; unknown keys are rejected before any
compute runs. Flags of the form ``--set section.key=value`` override single
keys (values parsed as JSON, falling back to a bare string).
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from .data_metrics import DATASET_KINDS, ToyDataset
from .diffusion import LossWeighting, Parameterization
from .distill import DistillConfig, RungEvalSettings
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "DEFAULT_CONFIG",
    "load_config",
    "apply_overrides",
    "dataset_from_config",
    "train_config_from",
    "distill_config_from",
    "eval_settings_from",
]


class ConfigError(ValueError):
    """Invalid configuration document or override."""


DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "dataset": {
        "kind": "ring8",
        "mean": 0.0,
        "variance": 1.0,
        "radius": 2.0,
        "mode_std": 0.05,
        "noise": 0.1,
    },
    "model": {
        "hidden_dims": [128, 128, 128],
        "time_embed_dim": 16,
        "activation": "silu",
        "parameterization": "v",
    },
    "train": {
        "weighting": "snr-plus-one",
        "batch_size": 256,
        "total_updates": 20000,
        "base_lr": 3e-4,
        "eval_every": 500,
        "discrete_grid": None,
        "time_epsilon": 1e-5,
        "ema_decay": None,
        "clip_norm": 1.0,
        "weight_decay": 0.001,
    },
    "distill": {
        "start_steps": 64,
        "end_steps": 1,
        "updates_per_iteration": 4000,
        "updates_small_n": 8000,
        "step_divisor": 2,
        "base_lr": 2e-4,
        "batch_size": 256,
        "weighting": None,
        "teacher_uses_ema": True,
        "ema_decay": None,
    },
    "eval": {
        "count": 10000,
        "agreement_count": 1000,
        "seed": 9999,
        "steps": 64,
        "coef_grid_size": 11,
        "ablate_updates": 2000,
        "ablate_coef": 0.0,
        "fast_budget_scales": [1.0, 0.5, 0.2, 0.1],
    },
}

# keys whose value may be null or a non-default type
_NULLABLE = {
    ("train", "discrete_grid"),
    ("train", "ema_decay"),
    ("distill", "weighting"),
    ("distill", "ema_decay"),
}


def _check_keys(doc: Any, defaults: Any, path: str = "") -> None:
    if isinstance(defaults, dict):
        if not isinstance(doc, dict):
            raise ConfigError(f"{path or 'config'} must be an object")
        for key in doc:
            if key not in defaults:
                raise ConfigError(f"unknown config key {path + key!r}")
            _check_keys(doc[key], defaults[key], f"{path}{key}.")


def _check_types(doc: dict, defaults: dict, path: tuple[str, ...] = ()) -> None:
    for key, default in defaults.items():
        if key not in doc:
            continue
        value = doc[key]
        here = path + (key,)
        if isinstance(default, dict):
            _check_types(value, default, here)
            continue
        if value is None or default is None:
            if value is None and (here in _NULLABLE or default is None):
                continue
            raise ConfigError(f"config key {'.'.join(here)} may not be null")
        if isinstance(default, bool) != isinstance(value, bool):
            raise ConfigError(f"config key {'.'.join(here)} expects a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {'.'.join(here)} expects a number")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"config key {'.'.join(here)} expects a string")
        elif isinstance(default, list) and not isinstance(value, list):
            raise ConfigError(f"config key {'.'.join(here)} expects a list")


def _deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values parse as JSON first."""
    config = copy.deepcopy(config)
    for item in overrides:
        key_path, sep, raw_value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = config
        keys = key_path.split(".")
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"unknown config section {key!r} in override {item!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {key_path!r}")
        node[keys[-1]] = value
    return config


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Defaults, deep-merged with the JSON file at ``path`` (if given) and
    then with the overrides; fully validated."""
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    _check_keys(doc, DEFAULT_CONFIG)
    config = _deep_merge(DEFAULT_CONFIG, doc)
    if overrides:
        config = apply_overrides(config, overrides)
    _check_keys(config, DEFAULT_CONFIG)
    _check_types(config, DEFAULT_CONFIG)
    if config["dataset"]["kind"] not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
    try:
        Parameterization(config["model"]["parameterization"])
        LossWeighting(config["train"]["weighting"])
        if config["distill"]["weighting"] is not None:
            LossWeighting(config["distill"]["weighting"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0 <= int(config["seed"]) < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return config


def dataset_from_config(config: dict) -> ToyDataset:
    d = config["dataset"]
    try:
        return ToyDataset(
            kind=d["kind"],
            mean=float(d["mean"]),
            variance=float(d["variance"]),
            radius=float(d["radius"]),
            mode_std=float(d["mode_std"]),
            noise=float(d["noise"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from(config: dict) -> TrainConfig:
    m, t = config["model"], config["train"]
    try:
        return TrainConfig(
            dataset=dataset_from_config(config),
            parameterization=Parameterization(m["parameterization"]),
            weighting=LossWeighting(t["weighting"]),
            batch_size=int(t["batch_size"]),
            total_updates=int(t["total_updates"]),
            base_lr=float(t["base_lr"]),
            seed=int(config["seed"]),
            eval_every=int(t["eval_every"]),
            hidden_dims=tuple(int(h) for h in m["hidden_dims"]),
            time_embed_dim=int(m["time_embed_dim"]),
            activation=m["activation"],
            discrete_grid=None if t["discrete_grid"] is None else int(t["discrete_grid"]),
            time_epsilon=float(t["time_epsilon"]),
            ema_decay=None if t["ema_decay"] is None else float(t["ema_decay"]),
            clip_norm=float(t["clip_norm"]),
            weight_decay=float(t["weight_decay"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def distill_config_from(config: dict) -> DistillConfig:
    d = config["distill"]
    try:
        return DistillConfig(
            start_steps=int(d["start_steps"]),
            end_steps=int(d["end_steps"]),
            updates_per_iteration=int(d["updates_per_iteration"]),
            updates_small_n=int(d["updates_small_n"]),
            step_divisor=int(d["step_divisor"]),
            base_lr=float(d["base_lr"]),
            batch_size=int(d["batch_size"]),
            seed=int(config["seed"]),
            weighting=None if d["weighting"] is None else LossWeighting(d["weighting"]),
            teacher_uses_ema=bool(d["teacher_uses_ema"]),
            ema_decay=None if d["ema_decay"] is None else float(d["ema_decay"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def eval_settings_from(config: dict) -> RungEvalSettings:
    e = config["eval"]
    return RungEvalSettings(
        count=int(e["count"]),
        agreement_count=int(e["agreement_count"]),
        seed=int(e["seed"]),
    )
