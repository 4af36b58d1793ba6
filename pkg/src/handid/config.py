"""Run configuration: flat ``key = value`` files over built-in defaults.

Defaults are the desk-scale (toy) schedule; :data:`FULL_SCALE_OVERRIDES` holds the
full-scale values for reference runs.
"""

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from handid.errors import ConfigError


@dataclass
class TrainConfig:
    seed: int = 0
    deterministic: bool = True
    # geometry
    channels: int = 1
    ln_input_size: int = 64
    align_input_size: int = 96
    palm_roi: tuple = (32, 32)
    finger_roi: tuple = (32, 8)
    ln_channels: tuple = (8, 16, 32, 32)
    backbone_channels: tuple = (8, 16, 32)
    em_kind: str = "conv"
    em_filters: int = 16
    palm_fc_dim: int = 128
    finger_fc_dim: int = 32
    tps_reg: float = 1e-6
    ln_norm_mean: float = 0.5
    ln_norm_std: float = 0.25
    # phase 1: localizer pretraining
    p1_epochs: int = 30
    p1_lr: float = 2e-3
    p1_batch: int = 16
    aug_rotation: tuple = (-15.0, 15.0)
    aug_translation: tuple = (-0.05, 0.05)
    aug_scale: tuple = (0.9, 1.1)
    aug_brightness: float = 0.2
    aug_contrast: float = 0.2
    # phase 2: end-to-end training
    p2_epochs: int = 60
    classes_per_batch: int = 8
    samples_per_class: int = 4
    fe_lr: float = 1e-3
    em_lr: float = 1e-3
    ln_lr: float = 1e-5
    unfreeze_epoch: int = 10
    # loss weights
    lambda_t: float = 40.0
    lambda_l1: float = 1.0
    lambda_l2: float = 0.1
    lambda_kp: float = 1.0
    margin: float = 0.3
    ce_batch_mean: bool = False
    grad_clip: float = 10.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = [
            "channels", "ln_input_size", "align_input_size", "em_filters", "palm_fc_dim", "finger_fc_dim",
            "p1_epochs", "p1_batch", "p2_epochs", "classes_per_batch", "samples_per_class",
            "unfreeze_epoch", "grad_clip", "ln_norm_std",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", key=name)
        nonneg = ["p1_lr", "fe_lr", "em_lr", "ln_lr", "lambda_t", "lambda_l1", "lambda_l2", "lambda_kp",
                  "margin", "tps_reg", "aug_brightness", "aug_contrast"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", key=name)
        if self.unfreeze_epoch >= self.p2_epochs:
            raise ConfigError("unfreeze_epoch must be smaller than p2_epochs", key="unfreeze_epoch")
        if self.em_kind not in ("fc", "conv"):
            raise ConfigError(f"em_kind must be fc or conv, got {self.em_kind!r}", key="em_kind")
        if self.classes_per_batch < 2:
            raise ConfigError("classes_per_batch must be >= 2 for triplet mining", key="classes_per_batch")
        for name in ("palm_roi", "finger_roi"):
            v = getattr(self, name)
            if len(v) != 2 or v[0] % 8 or v[1] % 8:
                raise ConfigError(f"{name} must be two multiples of 8", key=name)

    @property
    def batch_size(self):
        return self.classes_per_batch * self.samples_per_class

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


FULL_SCALE_OVERRIDES = {
    "ln_input_size": 128,
    "align_input_size": 227,
    "palm_roi": (128, 128),
    "finger_roi": (128, 32),
    "palm_fc_dim": 512,
    "finger_fc_dim": 128,
    "p1_epochs": 100,
    "p1_lr": 1e-5,
    "p1_batch": 16,
    "aug_rotation": (0.0, 360.0),
    "aug_translation": (-0.25, 0.25),
    "aug_scale": (0.8, 1.2),
    "p2_epochs": 200,
    "classes_per_batch": 64,
    "samples_per_class": 4,
    "fe_lr": 1e-4,
    "em_lr": 1e-3,
    "ln_lr": 1e-5,
    "unfreeze_epoch": 20,
}

_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _format(value):
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            items = [t for t in text.replace(" ", "").split(",") if t]
            kind = type(default[0]) if default else float
            return tuple(kind(t) for t in items)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key}", key=key) from None


def apply_overrides(config, overrides):
    """Return a new config with ``{key: str | value}`` overrides applied."""
    values = config.to_dict()
    for key, val in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        default = getattr(TrainConfig(), key)
        values[key] = _parse(key, val, default) if isinstance(val, str) else val
    for k, v in values.items():
        if isinstance(getattr(config, k), tuple):
            values[k] = tuple(v)
    return TrainConfig(**values)


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", key=line)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}", key=key)
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key=key)
        out[key] = val
    return out


def load_config(path=None, overrides=None):
    """Defaults < config file < overrides."""
    cfg = TrainConfig()
    if path is not None:
        p = Path(path)
        cfg = apply_overrides(cfg, parse_config_text(p.read_text(), str(p)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(config):
    return "".join(f"{k} = {_format(v)}\n" for k, v in config.to_dict().items())


def config_from_dict(d):
    """Rebuild a config from :meth:`TrainConfig.to_dict` output (e.g. JSON)."""
    d = dict(d)
    unknown = set(d) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}", key=sorted(unknown)[0])
    for k, v in d.items():
        if isinstance(getattr(TrainConfig(), k), tuple):
            d[k] = tuple(v)
    return TrainConfig(**d)
