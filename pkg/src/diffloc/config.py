"""Experiment configuration: a flat dataclass with strict INI round-trip.

Unknown sections or keys fail fast; every value is validated on load so a
bad config dies before any compute starts. Floats are serialized with
``repr`` so a write/read cycle is lossless.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .weather import ALL_KINDS


@dataclass
class ExperimentConfig:
    # dataset
    locations: int = 64
    views_per_location: int = 6
    image_size: int = 32
    conditions: tuple[str, ...] = ALL_KINDS
    distractors: int = 1024
    intensity_lo: float = 0.3
    intensity_hi: float = 0.8
    unseen_locations: int = 0
    seed: int = 0
    # schedule
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "posterior"
    # model
    embed_dim: int = 64
    encoder_width: int = 32
    patch: int = 4
    decoder_channels: tuple[int, ...] = (16, 8)
    head_hidden: int = 128
    dropout: float = 0.5
    # optimizer
    lr_backbone: float = 0.01
    lr_head: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 30
    # train behavior
    include_satellites: bool = True
    full_chain: bool = False
    ablation: str = "none"
    eval_every: int = 0
    matching_loss_mode: str = "cross_entropy"
    # eval
    ks: tuple[int, ...] = (1, 5, 10)

    def validate(self) -> "ExperimentConfig":
        if self.locations < 2:
            raise ConfigError("locations must be >= 2")
        if self.views_per_location < 1:
            raise ConfigError("views_per_location must be >= 1")
        if self.image_size < 8 or self.image_size % self.patch:
            raise ConfigError(f"image_size must be >= 8 and divisible by "
                              f"patch ({self.patch})")
        for kind in self.conditions:
            if kind not in ALL_KINDS:
                raise ConfigError(f"unknown weather kind {kind!r}")
        if not (0.0 <= self.intensity_lo <= self.intensity_hi <= 1.0):
            raise ConfigError("need 0 <= intensity_lo <= intensity_hi <= 1")
        if self.distractors < 0 or self.unseen_locations < 0:
            raise ConfigError("counts must be non-negative")
        if self.steps < 1:
            raise ConfigError("schedule steps must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.sigma_mode not in ("posterior", "beta"):
            raise ConfigError(f"sigma_mode must be posterior|beta, "
                              f"got {self.sigma_mode!r}")
        if min(self.embed_dim, self.encoder_width, self.head_hidden) < 1:
            raise ConfigError("model widths must be positive")
        if len(self.decoder_channels) != 2 or min(self.decoder_channels) < 1:
            raise ConfigError("decoder_channels needs two positive entries")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.lr_backbone <= 0 or self.lr_head <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, eval_every >= 0")
        if self.ablation not in ("none", "matching_only"):
            raise ConfigError(f"ablation must be none|matching_only, "
                              f"got {self.ablation!r}")
        if self.matching_loss_mode not in ("cross_entropy", "mse_onehot"):
            raise ConfigError(f"bad matching_loss_mode {self.matching_loss_mode!r}")
        if len(self.ks) == 0 or list(self.ks) != sorted(set(self.ks)) or self.ks[0] < 1:
            raise ConfigError("ks must be ascending unique positive integers")
        return self


_SECTIONS: dict[str, tuple[str, ...]] = {
    "dataset": ("locations", "views_per_location", "image_size", "conditions",
                "distractors", "intensity_lo", "intensity_hi",
                "unseen_locations", "seed"),
    "schedule": ("steps", "beta_start", "beta_end", "sigma_mode"),
    "model": ("embed_dim", "encoder_width", "patch", "decoder_channels",
              "head_hidden", "dropout"),
    "optimizer": ("lr_backbone", "lr_head", "momentum", "weight_decay",
                  "batch_size", "epochs"),
    "train": ("include_satellites", "full_chain", "ablation", "eval_every",
              "matching_loss_mode"),
    "eval": ("ks",),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if ftype == "str":
        return raw
    if ftype == "tuple[str, ...]":
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if ftype == "tuple[int, ...]":
        return tuple(int(s) for s in raw.split(",") if s.strip())
    raise ConfigError(f"unhandled config field type for {name}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def load_config(path) -> ExperimentConfig:
    """Parse an INI config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                values[key] = _parse_value(key, raw)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"[{section}] {key}: {e}") from None
    return ExperimentConfig(**values).validate()


def save_config(cfg: ExperimentConfig, path) -> None:
    cfg.validate()
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
