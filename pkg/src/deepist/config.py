"""Flat ``section.key = value`` settings covering every pipeline hyperparameter."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .model import LossConfig, PathCNNConfig, TemporalConfig
from .raster import RasterConfig, WindowingConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_iterations: int = 20000
    seed: int = 0
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    eval_every: int = 500
    cache_size: int = 100000
    dtype: str = "float64"
    timezone: str = "UTC"

    def __post_init__(self):
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError(f"split fractions must be three non-negatives summing to 1, got {self.split}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_iterations < 0:
            raise ConfigError("learning_rate, batch_size must be positive and max_iterations >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


SECTIONS = {
    "window": WindowingConfig,
    "raster": RasterConfig,
    "pathcnn": PathCNNConfig,
    "temporal": TemporalConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
}

# Reduced network for single-core CPU runs; same architecture, narrower and
# lower-resolution.  The full-size defaults are the "full" preset.
DESK_PRESET = {
    "raster.k": "32",
    "pathcnn.c_2d": "8,16,32",
    "pathcnn.lambda_dim": "128",
    "temporal.c_1d": "64,64",
    "temporal.s_max": "8",
    "temporal.head_dims": "128,128,1",
    "train.learning_rate": "0.001",
    "train.dtype": "float32",
    "train.eval_every": "250",
    # penalties scaled to the batch-mean loss, light dropout for the small model
    "loss.gamma1": "0.003",
    "loss.gamma2": "0.003",
    "loss.gamma3": "0.0003",
    "pathcnn.dropout_rate": "0.1",
}

PRESETS = {"full": {}, "desk": DESK_PRESET}


@dataclass(frozen=True)
class Settings:
    window: WindowingConfig = field(default_factory=WindowingConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    pathcnn: PathCNNConfig = field(default_factory=PathCNNConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def with_overrides(self, overrides: Mapping[str, str]) -> "Settings":
        grouped: dict[str, dict] = {}
        for key, raw in overrides.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown setting {key!r}")
            hints = typing.get_type_hints(SECTIONS[section])
            if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
                raise ConfigError(f"unknown setting {key!r}")
            grouped.setdefault(section, {})[name] = _coerce(key, raw, hints[name])
        updates = {}
        for section, values in grouped.items():
            try:
                updates[section] = dataclasses.replace(getattr(self, section), **values)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid {section} settings: {exc}") from exc
        return dataclasses.replace(self, **updates)

    def to_pairs(self) -> dict[str, str]:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out[f"{section}.{f.name}"] = _render(getattr(obj, f.name))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_pairs().items())


def _coerce(key: str, raw, hint):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint in (int, float, str):
            return hint(text)
        origin = typing.get_origin(hint)
        if origin is tuple:
            (inner, *_) = typing.get_args(hint)
            return tuple(inner(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    raise ConfigError(f"{key}: unsupported type {hint}")


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(lines: Iterable[str]) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_settings(path: str | Path | None = None, overrides: Mapping[str, str] | None = None,
                  preset: str = "full") -> Settings:
    """Defaults, then preset, then file, then explicit overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    settings = Settings().with_overrides(PRESETS[preset])
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            settings = settings.with_overrides(parse_pairs(fh))
    if overrides:
        settings = settings.with_overrides(overrides)
    return settings


def settings_from_pairs(pairs: Mapping[str, str]) -> Settings:
    return Settings().with_overrides(pairs)
