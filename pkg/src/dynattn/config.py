"""Declarative run configuration: one JSON document, dotted flag overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .evaluation import SynthSpec
from .model import HyperConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "model": {
        "S": 48,
        "d": 256,
        "h": 128,
        "L": 2,
        "n_heads": 4,
        "H": 12,
        "en_lambda": HyperConfig.en_lambda,
        "en_alpha": HyperConfig.en_alpha,
        "mse_lambda": HyperConfig.mse_lambda,
        "wmse_alpha": HyperConfig.wmse_alpha,
        "family": "zinb",
    },
    "train": {
        "K_cap": None,
        "steps_per_anchor": TrainConfig.steps_per_anchor,
        "learning_rate": TrainConfig.learning_rate,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "clip_norm": 10.0,
        "weight_decay": TrainConfig.weight_decay,
    },
    "synth": {k: v for k, v in SynthSpec().to_dict().items() if k != "seed"},
    "eval": {"taus": None, "granularity": "country", "test_months": 12},
    "diagnostics": {"rho": 0.10, "delta": 0.10, "anchors": "test"},
    "data": {"schema": None, "format": None},
}

GRANULARITY_TAUS = {"country": [25], "grid": [1]}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "schema":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> dict:
    """``"train.learning_rate=0.01"`` -> nested dict; values parse as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def resolve(path=None, overrides=()) -> dict:
    """Defaults <- config file <- overrides, with unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, loaded)
    for ov in overrides:
        cfg = _merge(cfg, ov if isinstance(ov, dict) else parse_override(ov))
    if cfg["eval"]["granularity"] not in GRANULARITY_TAUS:
        raise ConfigError(f"eval.granularity must be one of {sorted(GRANULARITY_TAUS)}")
    if cfg["eval"]["taus"] is None:
        cfg["eval"]["taus"] = list(GRANULARITY_TAUS[cfg["eval"]["granularity"]])
    if cfg["diagnostics"]["anchors"] not in ("test", "train"):
        raise ConfigError("diagnostics.anchors must be 'test' or 'train'")
    # validate blocks eagerly so a bad value fails as a config error
    try:
        hyper_config(cfg, F=1)
        train_config(cfg)
        synth_spec(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def hyper_config(cfg: dict, F: int) -> HyperConfig:
    return HyperConfig.from_dict({"F": F, **cfg["model"]})


def train_config(cfg: dict, anchors=None) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "anchors": anchors, "seed": cfg["seed"]})


def synth_spec(cfg: dict) -> SynthSpec:
    return SynthSpec.from_dict({**cfg["synth"], "seed": cfg["seed"]})


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
