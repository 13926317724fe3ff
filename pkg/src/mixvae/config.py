"""Flat key=value run configuration with dotted section names.

A config file is plain text: one ``section.key=value`` per line, ``#``
comments, blank lines ignored. Every knob has a default, unknown keys are
rejected by name, and the fully resolved configuration can be rendered back
to text (the run manifest) that parses to the identical configuration.

The default values describe the desk-scale setup (32x32 synthetic corpus,
6-block encoder); paper-scale values are set explicitly in a config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .augment import AugmentConfig, IMAGENET_MEAN, IMAGENET_STD
from .errors import ConfigError
from .mixup import MixupConfig
from .model import ModelConfig
from .objective import ObjectiveConfig
from .trainer import OptimConfig

SEED_ENV_VAR = "MIXVAE_SEED"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> Optional[Tuple[int, ...]]:
    if not text.strip():
        return None
    return tuple(int(tok) for tok in text.split(","))


def _parse_float_list(text: str) -> Tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(","))


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda s: s.strip(),
    "int_list": _parse_int_list,
    "float_list": _parse_float_list,
}

# key -> (type tag, default). The default is the already-typed value.
KNOWN_KEYS: Dict[str, Tuple[str, object]] = {
    "seed": ("int", 0),
    "data.manifest": ("str", ""),
    "data.synthetic": ("bool", True),
    "data.n_per_class": ("int", 200),
    "data.resolution": ("int", 32),
    "data.split": ("str", ""),
    "data.split_fraction": ("float", 0.8),
    "model.input_resolution": ("int", 32),
    "model.num_blocks": ("int", 6),
    "model.channels_per_block": ("int_list", None),
    "model.latent_dim": ("int", 16),
    "model.dropout_p": ("float", 0.3),
    "model.classifier_hidden": ("int", 64),
    "model.decoder_channels": ("int_list", (32, 24, 16, 8)),
    "model.recon_resolution": ("int", 32),
    "model.use_decoder": ("bool", True),
    "model.base_channels": ("int", 8),
    "model.channel_cap": ("int", 512),
    "mixup.enabled": ("bool", True),
    "mixup.alpha": ("float", 1.0),
    "mixup.eligible_blocks": ("int_list", None),
    "objective.recon_weight": ("float", 1.0),
    "objective.kl_weight": ("float", 1.0),
    "objective.supervised_weight": ("float", 1.0),
    "objective.supervised_mode": ("str", "categorical"),
    "optim.lr": ("float", 0.01),
    "optim.momentum": ("float", 0.9),
    "optim.nesterov": ("bool", True),
    "optim.weight_decay": ("float", 1e-4),
    "optim.batch_size": ("int", 64),
    "optim.plateau_factor": ("float", 0.1),
    "optim.plateau_patience": ("int", 10),
    "optim.stage1_epochs": ("int", 30),
    "optim.stage2_epochs": ("int", 50),
    "optim.plateau_monitor": ("str", "val_total"),
    "optim.exclude_bias_decay": ("bool", False),
    "augment.resize_to": ("int_list", None),
    "augment.rotation_range_deg": ("float_list", (-40.0, 40.0)),
    "augment.zoom_range": ("float_list", (0.8, 1.2)),
    "augment.hflip_prob": ("float", 0.5),
    "augment.vflip_prob": ("float", 0.5),
    "augment.normalize_mean": ("float_list", IMAGENET_MEAN),
    "augment.normalize_std": ("float_list", IMAGENET_STD),
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Raw key -> value-string pairs from config text; rejects malformed lines."""
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source} line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{source} line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


@dataclass
class RunConfig:
    """Fully typed, fully resolved run configuration."""
    values: Dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            input_resolution=v["model.input_resolution"],
            num_blocks=v["model.num_blocks"],
            channels_per_block=v["model.channels_per_block"],
            latent_dim=v["model.latent_dim"],
            dropout_p=v["model.dropout_p"],
            classifier_hidden=v["model.classifier_hidden"],
            decoder_channels=v["model.decoder_channels"] or (32, 24, 16, 8),
            recon_resolution=v["model.recon_resolution"],
            use_decoder=v["model.use_decoder"],
            base_channels=v["model.base_channels"],
            channel_cap=v["model.channel_cap"],
        )

    def mixup_config(self) -> MixupConfig:
        v = self.values
        return MixupConfig(enabled=v["mixup.enabled"], alpha=v["mixup.alpha"],
                           eligible_blocks=v["mixup.eligible_blocks"])

    def objective_config(self) -> ObjectiveConfig:
        v = self.values
        return ObjectiveConfig(
            recon_weight=v["objective.recon_weight"],
            kl_weight=v["objective.kl_weight"],
            supervised_weight=v["objective.supervised_weight"],
            supervised_mode=v["objective.supervised_mode"],
        )

    def optim_config(self) -> OptimConfig:
        v = self.values
        return OptimConfig(
            lr=v["optim.lr"], momentum=v["optim.momentum"], nesterov=v["optim.nesterov"],
            weight_decay=v["optim.weight_decay"], batch_size=v["optim.batch_size"],
            plateau_factor=v["optim.plateau_factor"],
            plateau_patience=v["optim.plateau_patience"],
            stage1_epochs=v["optim.stage1_epochs"], stage2_epochs=v["optim.stage2_epochs"],
            plateau_monitor=v["optim.plateau_monitor"],
            exclude_bias_decay=v["optim.exclude_bias_decay"],
        )

    def _augment(self, mode: str) -> AugmentConfig:
        v = self.values
        crop = v["model.input_resolution"]
        resize = v["augment.resize_to"]
        if resize is None:
            side = max(crop, crop * 8 // 7)
            resize = (side, side)
        elif len(resize) == 1:
            resize = (resize[0], resize[0])
        return AugmentConfig(
            resize_to=tuple(resize),
            rotation_range_deg=tuple(v["augment.rotation_range_deg"]),
            zoom_range=tuple(v["augment.zoom_range"]),
            hflip_prob=v["augment.hflip_prob"],
            vflip_prob=v["augment.vflip_prob"],
            crop_to=(crop, crop),
            normalize_mean=tuple(v["augment.normalize_mean"]),
            normalize_std=tuple(v["augment.normalize_std"]),
            mode=mode,
        )

    def train_augment(self) -> AugmentConfig:
        return self._augment("train")

    def test_augment(self) -> AugmentConfig:
        return self._augment("test")


def resolve_config(raw: Dict[str, str], apply_env_seed: bool = True) -> RunConfig:
    """Typed values from raw strings; rejects unknown keys, applies defaults.

    When `apply_env_seed` is set and MIXVAE_SEED is present in the
    environment, it overrides the configured seed.
    """
    unknown = set(raw) - set(KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    values: Dict[str, object] = {}
    for key, (type_tag, default) in KNOWN_KEYS.items():
        if key in raw:
            try:
                values[key] = _PARSERS[type_tag](raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key {key}: cannot parse {raw[key]!r} as {type_tag} ({exc})")
        else:
            values[key] = default
    if apply_env_seed and os.environ.get(SEED_ENV_VAR):
        try:
            values["seed"] = int(os.environ[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {os.environ[SEED_ENV_VAR]!r}")
    return RunConfig(values=values)


def load_config(path: Optional[str], apply_env_seed: bool = True) -> RunConfig:
    raw = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            raw = parse_config_text(fh.read(), path)
    return resolve_config(raw, apply_env_seed=apply_env_seed)


def _format_value(type_tag: str, value) -> str:
    if value is None:
        return ""
    if type_tag == "bool":
        return "true" if value else "false"
    if type_tag in ("int", "str"):
        return str(value)
    if type_tag == "float":
        return repr(float(value))
    if type_tag == "int_list":
        return ",".join(str(int(x)) for x in value)
    if type_tag == "float_list":
        return ",".join(repr(float(x)) for x in value)
    raise ConfigError(f"unknown type tag {type_tag}")


def manifest_text(config: RunConfig) -> str:
    """Render the resolved config as re-parseable key=value text."""
    lines = ["# resolved run configuration; feed back via --config to reproduce"]
    for key in sorted(KNOWN_KEYS):
        type_tag, _ = KNOWN_KEYS[key]
        lines.append(f"{key}={_format_value(type_tag, config.values[key])}")
    return "\n".join(lines) + "\n"
