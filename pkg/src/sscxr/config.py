"""Flat, typed run configuration documents for the command-line tools.

A config file is a JSON object of scalar (or integer-list) values. Each
command accepts a fixed set of keys; unknown keys and wrongly typed
values are rejected. Precedence, lowest first: built-in defaults, the
config file, ``--set key=value`` overrides, dedicated command flags.
Relative paths in a config file resolve against the file's directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

from .corruption import CorruptionSpec
from .pretrain import DecoderConfig, PretrainConfig
from .vit import EncoderConfig


class ConfigError(ValueError):
    pass


_ENCODER = {
    "image_size": (int, 256),
    "patch_size": (int, 16),
    "embed_dim": (int, 384),
    "depth": (int, 12),
    "num_heads": (int, 6),
    "mlp_ratio": (float, 4.0),
    "use_class_token": (bool, True),
}

_COMMON = {
    "seed": (int, 0),
    "manifest": (Path, None),
    "output_dir": (Path, None),
    "batch_size": (int, 16),
    "epochs": (int, 1),
    "learning_rate": (float, 5e-4),
    "min_lr": (float, 1e-6),
}

SCHEMAS: dict[str, dict[str, tuple]] = {
    "pretrain": {
        **_ENCODER,
        **_COMMON,
        "weight_decay": (float, 0.05),
        "loss_reduction": (str, "mean-masked"),
        "noise_fraction": (float, 0.70),
        "alien_fraction": (float, 0.35),
        "corruption_mode": (str, "per-sample-choice"),
        "group_area_min": (int, 4),
        "group_area_max": (int, 25),
        "group_aspect_min": (float, 1 / 3),
        "group_aspect_max": (float, 3.0),
        "augment": (bool, True),
        "flip_p": (float, 0.5),
        "crop_scale_min": (float, 0.8),
        "crop_scale_max": (float, 1.0),
        "checkpoint_every": (int, 0),
        "warmup_steps": (int, 0),
        "decoder_hidden_dims": (list, [2048, 2048]),
        "decoder_bottleneck_dim": (int, 256),
    },
    "finetune-cls": {
        **_ENCODER,
        **_COMMON,
        "epochs": (int, 100),
        "weight_decay": (float, 0.05),
        "num_classes": (int, 2),
        "max_steps": (int, None),
        "linear_probe": (bool, False),
        "class_weights": (bool, False),
    },
    "finetune-seg": {
        **_ENCODER,
        **_COMMON,
        "epochs": (int, 400),
        "weight_decay": (float, 1e-5),
        "max_steps": (int, None),
        "seg_tap_layers": (list, None),
        "seg_feature_size": (int, 16),
        "threshold": (float, 0.5),
    },
}


def _coerce(key: str, kind, value):
    if value is None:
        return None
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is Path:
        if isinstance(value, (str, Path)):
            return Path(value)
    elif kind is list:
        if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return list(value)
    raise ConfigError(f"config key {key!r}: expected {kind.__name__}, got {value!r}")


def _parse_override(text: str):
    """Value of a ``--set`` override: JSON if it parses, else a bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(command: str, path=None, overrides: Optional[list[str]] = None, **flags) -> dict[str, Any]:
    """Merge defaults, file values, ``key=value`` overrides and flags for ``command``."""
    schema = SCHEMAS[command]
    cfg = {k: default for k, (_, default) in schema.items()}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = path.parent
        for key, value in doc.items():
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r}")
            value = _coerce(key, schema[key][0], value)
            if isinstance(value, Path) and not value.is_absolute():
                value = base / value
            cfg[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, schema[key][0], _parse_override(raw))
    for key, value in flags.items():
        if value is None:
            continue
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, schema[key][0], value)
    return cfg


def to_jsonable(cfg: dict) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(cfg.items())}


def write_resolved(cfg: dict, out_dir, name: str = "resolved_config.json") -> Path:
    out = Path(out_dir) / name
    out.write_text(json.dumps(to_jsonable(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def encoder_config(cfg: dict) -> EncoderConfig:
    try:
        return EncoderConfig(**{k: cfg[k] for k in _ENCODER})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def pretrain_config(cfg: dict) -> PretrainConfig:
    try:
        spec = CorruptionSpec(
            noise_fraction=cfg["noise_fraction"],
            alien_fraction=cfg["alien_fraction"],
            mode=cfg["corruption_mode"],
            group_area=(cfg["group_area_min"], cfg["group_area_max"]),
            group_aspect=(cfg["group_aspect_min"], cfg["group_aspect_max"]),
        )
        return PretrainConfig(
            learning_rate=cfg["learning_rate"],
            weight_decay=cfg["weight_decay"],
            min_lr=cfg["min_lr"],
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            seed=cfg["seed"],
            loss_reduction=cfg["loss_reduction"],
            corruption=spec,
            augment=cfg["augment"],
            flip_p=cfg["flip_p"],
            crop_scale=(cfg["crop_scale_min"], cfg["crop_scale_max"]),
            checkpoint_every=cfg["checkpoint_every"],
            warmup_steps=cfg["warmup_steps"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def decoder_config(cfg: dict) -> DecoderConfig:
    return DecoderConfig(tuple(cfg["decoder_hidden_dims"]), cfg["decoder_bottleneck_dim"])


def require(cfg: dict, *keys: str):
    for key in keys:
        if cfg.get(key) is None:
            raise ConfigError(f"config key {key!r} is required")
