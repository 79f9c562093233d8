"""Declarative run configuration: YAML sections, defaults, dotted overrides.

Unknown keys are rejected, not ignored, so typos fail loudly. Overrides use
dotted paths (`trainer.max_iters=1`) with YAML scalar semantics for values.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .preprocessing import WindowSpec
from .synthetic import SynthSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration file, key, or override."""


DEFAULTS: dict = {
    "data": {
        "manifest": None,
        "labeled_fraction": 0.1,
        "split_seed": 0,
        "val_count": 0,
        "test_count": 0,
    },
    "preprocessing": {
        "patch_shape": [16, 16, 16],
        "normalize": "minmax",
        "ct_window_level": 40.0,
        "ct_window_width": 400.0,
        "crop_nonzero": False,
    },
    "network": {
        "base_channels": 16,
        "num_stages": 4,
        "num_classes": 2,
        "mmf_enabled": True,
        "mae_enabled": True,
        "dropout_rate": 0.5,
        "mae_kernel_small": 3,
        "mae_kernel_large": 5,
    },
    "loss": {
        "alpha": 1.0,
        "alpha_rampup_iters": 0,
        "dice_epsilon": 1e-5,
    },
    "trainer": {
        "max_iters": 2000,
        "batch_size": 4,
        "labeled_per_batch": 2,
        "lr_initial": 1e-2,
        "lr_power": 0.9,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "eval_every": 250,
        "checkpoint_every": 500,
        "seed": 1337,
        "mcml_enabled": True,
        "threads": 0,
    },
    "synth": {
        "shape": [16, 16, 16],
        "num_blobs": 2,
        "noise_sigma": 0.05,
        "contrast_a": 0.6,
        "contrast_b": 0.6,
        "count": 24,
        "base_seed": 7,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a section, got {type(value).__name__}")
            _merge(base[key], value, here)
        else:
            base[key] = value
    return base


def load_config(path=None) -> dict:
    """Defaults merged with an optional YAML file; unknown keys error."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        loaded = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if loaded is None:
        return cfg
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _merge(cfg, loaded)


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply dotted key=value overrides in place (`trainer.max_iters=1`)."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[k]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"{dotted} is a section, not a value")
        try:
            node[leaf] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    return cfg


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False))


def train_config_from(cfg: dict) -> TrainConfig:
    t, n, l, p = cfg["trainer"], cfg["network"], cfg["loss"], cfg["preprocessing"]
    try:
        return TrainConfig(
            max_iters=t["max_iters"],
            batch_size=t["batch_size"],
            labeled_per_batch=t["labeled_per_batch"],
            lr_initial=t["lr_initial"],
            lr_power=t["lr_power"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            alpha=l["alpha"],
            alpha_rampup_iters=l["alpha_rampup_iters"],
            dice_epsilon=l["dice_epsilon"],
            patch_shape=tuple(p["patch_shape"]),
            eval_every=t["eval_every"],
            checkpoint_every=t["checkpoint_every"],
            seed=t["seed"],
            mmf_enabled=n["mmf_enabled"],
            mae_enabled=n["mae_enabled"],
            mcml_enabled=t["mcml_enabled"],
            num_classes=n["num_classes"],
            base_channels=n["base_channels"],
            num_stages=n["num_stages"],
            dropout_rate=n["dropout_rate"],
            mae_kernel_small=n["mae_kernel_small"],
            mae_kernel_large=n["mae_kernel_large"],
            threads=t["threads"],
            normalize=p["normalize"],
            ct_window_level=p["ct_window_level"],
            ct_window_width=p["ct_window_width"],
            crop_inputs=p["crop_nonzero"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def synth_spec_from(cfg: dict) -> SynthSpec:
    s = cfg["synth"]
    return SynthSpec(
        shape=tuple(s["shape"]),
        num_blobs=s["num_blobs"],
        noise_sigma=s["noise_sigma"],
        contrast_a=s["contrast_a"],
        contrast_b=s["contrast_b"],
        seed=s["base_seed"],
    )


def window_from(cfg: dict) -> WindowSpec:
    p = cfg["preprocessing"]
    return WindowSpec(level=p["ct_window_level"], width=p["ct_window_width"])
