"""Run configuration: a small dataclass tree mirroring the INI file layout.

Sections: [data] [model] [loss_weights] [layer_weights] [optim] [schedule]
[run]. Every key has a built-in default; a config file overrides defaults and
command-line flags (--section.key value) override the file.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .losses import W_REC, W_STR, W_TEX

TEXTURE_DIM_REQUIRED = 8


@dataclass
class DataConfig:
    root: str = "data/toy"
    train_h: int = 64
    train_w: int = 128
    crop_h: int = 32
    crop_w: int = 64
    eval_h: int = 64
    eval_w: int = 128


@dataclass
class ModelConfig:
    width: int = 64
    z_dim: int = 8
    disc_width: int = 32


@dataclass
class LossWeightsConfig:
    seg_s: float = 1.0
    seg_adv: float = 0.001
    rec: float = 0.1
    trans_str: float = 0.1
    trans_tex: float = 0.05
    trans_adv: float = 0.01
    seg_s2t: float = 0.1
    detach_label_transfer: bool = True


@dataclass
class LayerWeightsConfig:
    rec: tuple = W_REC
    str: tuple = W_STR  # field name mirrors the config key
    tex: tuple = W_TEX


@dataclass
class OptimConfig:
    enc_lr: float = 2.5e-4
    enc_momentum: float = 0.9
    enc_weight_decay: float = 5e-4
    dec_lr: float = 1.0e-3
    aux_lr: float = 1.0e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99


@dataclass
class ScheduleConfig:
    max_iters: int = 5000
    batch_size: int = 2
    eval_every: int = 500
    poly_power: float = 0.9


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    ablation: str = "full"
    device: str = "cpu"


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeightsConfig = field(default_factory=LossWeightsConfig)
    layer_weights: LayerWeightsConfig = field(default_factory=LayerWeightsConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "Config":
        if self.model.z_dim != TEXTURE_DIM_REQUIRED:
            raise ConfigurationError(f"model.z_dim must be {TEXTURE_DIM_REQUIRED}")
        if self.data.crop_h % 16 or self.data.crop_w % 16:
            raise ConfigurationError("crop dims must be divisible by 16")
        if self.data.crop_h > self.data.train_h or self.data.crop_w > self.data.train_w:
            raise ConfigurationError("crop size exceeds train resize size")
        if self.schedule.max_iters < 0 or self.schedule.batch_size < 1:
            raise ConfigurationError("invalid schedule values")
        for name in ("rec", "str", "tex"):
            w = getattr(self.layer_weights, name)
            if len(w) != 5 or any(v < 0 for v in w) or not any(v > 0 for v in w):
                raise ConfigurationError(f"layer_weights.{name} must be 5 non-negative values, one positive")
        lam = self.loss_weights
        for f in dataclasses.fields(lam):
            v = getattr(lam, f.name)
            if isinstance(v, float) and v < 0:
                raise ConfigurationError(f"loss_weights.{f.name} must be non-negative")
        return self


SECTIONS = ("data", "model", "loss_weights", "layer_weights", "optim", "schedule", "run")


def default_config() -> Config:
    return Config()


def iter_keys(cfg: Config | None = None):
    """Yield (section, key, value) for every configuration entry."""
    cfg = cfg or default_config()
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            yield section, f.name, getattr(sub, f.name)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ConfigurationError(f"cannot parse {section}.{key} value {raw!r}") from None


def set_value(cfg: Config, section: str, key: str, raw: str) -> None:
    """Assign one dotted key from its string form, with type checking."""
    if section not in SECTIONS:
        raise ConfigurationError(f"unknown config section {section!r}")
    sub = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(sub)}
    if key not in names:
        raise ConfigurationError(f"unknown config key {section}.{key}")
    setattr(sub, key, _coerce(section, key, raw, getattr(sub, key)))


def apply_overrides(cfg: Config, overrides: dict[str, str]) -> Config:
    """Return a copy of cfg with dotted-key string overrides applied."""
    out = copy.deepcopy(cfg)
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ConfigurationError(f"override key {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        set_value(out, section, key, raw)
    return out


def load_config(path: Path | str) -> Config:
    """Parse an INI file over the built-in defaults; unknown keys are errors."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string(text)
    cfg = default_config()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        for key, raw in parser.items(section):
            set_value(cfg, section, key, raw)
    return cfg


def save_config(cfg: Config, path: Path | str) -> Path:
    parser = configparser.ConfigParser()
    for section in SECTIONS:
        parser.add_section(section)
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            parser.set(section, f.name, _format_value(getattr(sub, f.name)))
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def config_to_dict(cfg: Config) -> dict:
    out = {}
    for section, key, value in iter_keys(cfg):
        out.setdefault(section, {})[key] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(data: dict) -> Config:
    cfg = default_config()
    for section, entries in data.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        sub = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(sub)}
        for key, value in entries.items():
            if key not in names:
                raise ConfigurationError(f"unknown config key {section}.{key}")
            setattr(sub, key, tuple(value) if isinstance(value, list) else value)
    return cfg
