"""Run configuration: one JSON document holding the training setup,
architecture, loss weights, and ablation switches.

Validation is strict: unknown keys anywhere are rejected so typos fail
loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .layers import ModelConfig
from .losses import AblationFlags, LossWeights
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    model: ModelConfig
    loss: LossWeights
    ablation: AblationFlags

    def to_dict(self) -> dict:
        return {
            "train": {
                "epochs": self.train.epochs,
                "lr": self.train.lr,
                "beta1": self.train.beta1,
                "beta2": self.train.beta2,
                "eps": self.train.eps,
                "weight_decay": self.train.weight_decay,
                "batch_size": self.train.batch_size,
                "k_folds": self.train.k_folds,
                "seed": self.train.seed,
                "patience": self.train.patience,
            },
            "model": self.model.to_dict(),
            "loss": {"mu1": self.loss.mu1, "mu2": self.loss.mu2},
            "ablation": self.ablation.to_dict(),
        }


_SECTION_FIELDS = {
    "train": {
        "epochs": int, "lr": float, "beta1": float, "beta2": float, "eps": float,
        "weight_decay": float, "batch_size": int, "k_folds": int, "seed": int,
        "patience": int,
    },
    "model": {
        "pos_layer_dims": list, "neg_layer_dims": list, "heads": int,
        "mlp_dims": list, "activation": str, "attention_slope": float,
        "gamma": float, "include_self": bool, "init_features": str,
        "no_attention": bool, "no_threshold": bool,
    },
    "loss": {"mu1": float, "mu2": float},
    "ablation": {
        "no_recon": bool, "no_global": bool, "no_local": bool,
        "no_attention": bool, "no_threshold": bool, "recon_only": bool,
    },
}


def _check_section(name: str, given: dict) -> dict:
    allowed = _SECTION_FIELDS[name]
    out = {}
    for key, value in given.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
        want = allowed[key]
        if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            out[key] = float(value)
        elif want is int and isinstance(value, int) and not isinstance(value, bool):
            out[key] = value
        elif want is bool and isinstance(value, bool):
            out[key] = value
        elif want is str and isinstance(value, str):
            out[key] = value
        elif want is list and isinstance(value, list):
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{name}.{key} must be a list of integers")
            out[key] = value
        else:
            raise ConfigError(f"{name}.{key} has wrong type {type(value).__name__}")
    return out


def parse_config(doc: dict) -> RunConfig:
    """Validate a parsed JSON document and fill in defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTION_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    sections = {}
    for name in _SECTION_FIELDS:
        given = doc.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"config section {name} must be an object")
        sections[name] = _check_section(name, given)

    try:
        train = TrainConfig(**sections["train"])
        train.validate()
        model_kwargs = dict(sections["model"])
        for key in ("pos_layer_dims", "neg_layer_dims", "mlp_dims"):
            if key in model_kwargs:
                model_kwargs[key] = tuple(model_kwargs[key])
        model = ModelConfig(**model_kwargs)
        model.validate()
        loss = LossWeights(gamma=model.gamma, **sections["loss"])
        loss.validate()
        ablation = AblationFlags(**sections["ablation"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    if ablation.no_attention or ablation.no_threshold:
        model = replace(
            model,
            no_attention=model.no_attention or ablation.no_attention,
            no_threshold=model.no_threshold or ablation.no_threshold,
        )
    return RunConfig(train=train, model=model, loss=loss, ablation=ablation)


def load_config(path: str | Path | None) -> RunConfig:
    """Read and validate a config file; None yields all defaults."""
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc)
