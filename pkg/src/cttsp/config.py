"""Run configuration: a flat ``key = value`` text file with per-dataset presets.

Recognised keys (all optional)::

    preset          jingdong | dc | tafeng | taobao   (fills the model defaults below)
    dataset         preprocessed dataset directory
    out             output directory for checkpoints, logs and reports
    mode            transductive | inductive
    ratios          train,validation,test user ratios for inductive splits
    split_seed      seed of the inductive user shuffle
    dim, dropout, lambda_up, lambda_cp, element_pool_self
    lr, min_lr, max_epochs, patience, seed
    reset_memory    true (default) zeroes the memory bank every epoch; false carries it over
    ks              comma-separated cut-offs, e.g. 10,20,30,40

Lines starting with ``#`` and text after `` #`` are comments.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

from .model import ModelConfig
from .training import TrainConfig

PRESETS: dict[str, dict[str, Any]] = {
    "jingdong": {"lr": 0.001, "dropout": 0.2, "dim": 64, "lambda_up": 0.9, "lambda_cp": 0.9},
    "dc": {"lr": 0.001, "dropout": 0.2, "dim": 64, "lambda_up": 0.5, "lambda_cp": 0.0},
    "tafeng": {"lr": 0.001, "dropout": 0.15, "dim": 64, "lambda_up": 0.05, "lambda_cp": 0.7},
    "taobao": {"lr": 0.001, "dropout": 0.05, "dim": 32, "lambda_up": 0.9, "lambda_cp": 0.7},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: Optional[str] = None
    dataset: Optional[str] = None
    out: Optional[str] = None
    mode: str = "transductive"
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    dim: int = 64
    dropout: float = 0.2
    lambda_up: float = 0.5
    lambda_cp: float = 0.0
    element_pool_self: bool = True
    lr: float = 0.001
    min_lr: float = 0.0
    max_epochs: int = 2000
    patience: int = 100
    seed: int = 0
    reset_memory: bool = True
    ks: tuple[int, ...] = (10, 20, 30, 40)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("transductive", "inductive"):
            raise ConfigError(f"mode must be transductive or inductive, got {self.mode!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError(f"min_lr must lie in [0, lr], got {self.min_lr}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be non-negative, got {self.patience}")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError(f"ks must be positive integers, got {self.ks}")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {self.ratios}")
        try:
            self.model_config()
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.dim, self.dropout, self.lambda_up, self.lambda_cp, self.element_pool_self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr, self.max_epochs, self.patience, self.seed, self.min_lr, tuple(self.ks),
                           self.reset_memory)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["ks"] = list(self.ks)
        return d

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **values) -> "RunConfig":
        return replace(self, **{k: v for k, v in values.items() if v is not None})


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind in ("int",):
            return int(raw)
        if kind in ("float",):
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(","))
        if kind.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw or None


def parse_config(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    """Parse flat ``key = value`` text; preset values apply before explicit keys."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err.message.splitlines()[0]}") from None
    items = dict(parser["run"])
    values: dict[str, Any] = {}
    preset = items.get("preset", "").strip().lower() or None
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        values.update(PRESETS[preset])
        values["preset"] = preset
    unknown = sorted(set(items) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, raw in items.items():
        if key != "preset":
            values[key] = _convert(key, raw)
    for key in ("dataset", "out"):
        if values.get(key) and base_dir is not None and not Path(values[key]).is_absolute():
            values[key] = str((base_dir / values[key]).resolve())
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


def preset_config(name: str, **overrides) -> RunConfig:
    if name.lower() not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return RunConfig(preset=name.lower(), **{**PRESETS[name.lower()], **overrides})
