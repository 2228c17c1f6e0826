"""Training configuration and its flat ``key = value`` file format.

Keys are the field names of :class:`TrainConfig` and :class:`NetworkConfig`
(e.g. ``epochs = 30``, ``base_width = 16``, ``encoder_stage_depths = 2,2,2,2``).
Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

from .nn import ConfigError, NetworkConfig, desk_config, full_config

LOSSES = ("dice_wce", "tversky")


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-4
    decay_factor: float = 0.5
    decay_epoch: int = 30
    batch_size: int = 4
    val_batch_size: int = 2
    loss: str = "tversky"
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    tversky_doubled: bool = True
    class_weights: str = "batch"  # or "dataset"
    augment: str = "low"
    tta: bool = True
    val_every: int = 1
    stop_at_fscore: float = 0.0  # 0 disables early stopping
    normalization: str = "dataset"  # or "imagenet"
    seed: int = 0
    min_distance: float = 6.0
    network: NetworkConfig = field(default_factory=NetworkConfig)

    @property
    def num_classes(self) -> int:
        return self.network.num_classes

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.decay_epoch:
            raise ConfigError("decay_epoch must be >= 1")
        if self.decay_epoch > self.epochs:
            raise ConfigError(f"decay_epoch {self.decay_epoch} exceeds epochs {self.epochs}")
        if self.batch_size < 1 or self.val_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.tversky_alpha < 0 or self.tversky_beta < 0:
            raise ConfigError("tversky_alpha/beta must be non-negative")
        if self.class_weights not in ("batch", "dataset"):
            raise ConfigError("class_weights must be batch or dataset")
        if self.augment not in ("none", "low", "high"):
            raise ConfigError(f"augment must be none, low or high, got {self.augment!r}")
        if self.normalization not in ("dataset", "imagenet"):
            raise ConfigError("normalization must be dataset or imagenet")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")
        self.network.validate()
        return self

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr * (self.decay_factor if epoch >= self.decay_epoch else 1.0)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "network"}
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = NetworkConfig.from_dict(d.pop("network", {}))
        return cls(network=net, **d)


def desk_train_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(epochs=30, decay_epoch=15, network=desk_config())
    return apply_overrides(cfg, overrides)


def full_train_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(network=full_config())
    return apply_overrides(cfg, overrides)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(raw, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (list, tuple)):
        items = [int(v) for v in raw.replace("x", ",").split(",") if v.strip()]
        return type(default)(items)
    return raw


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Set flat keys on the train or network config, parsing string values."""
    train_keys = {f.name for f in fields(TrainConfig)} - {"network"}
    net_keys = {f.name for f in fields(NetworkConfig)}
    for key, raw in overrides.items():
        key = key.strip().replace("-", "_")
        if key == "num_classes":
            target = cfg.network
        elif key in train_keys:
            target = cfg
        elif key in net_keys:
            target = cfg.network
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            value = _parse_value(raw, getattr(target, key))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        setattr(target, key, value)
    keys = {k.strip().replace("-", "_") for k in overrides}
    if "epochs" in keys and "decay_epoch" not in keys and cfg.epochs >= 1:
        # both profiles decay at the halfway point
        cfg.decay_epoch = max(1, cfg.epochs // 2)
    return cfg.validate()


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    base = base or desk_train_config()
    return apply_overrides(base, parse_config_text(Path(path).read_text()))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        if f.name == "network":
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for f in fields(cfg.network):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.network, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def copy_config(cfg: TrainConfig) -> TrainConfig:
    return copy.deepcopy(cfg)
