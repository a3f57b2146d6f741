"""Run configuration: one record for every setting a command can use.

The file format is flat ``section.key = value`` lines (``#`` comments)::

    stage1.lr = 0.001
    stage2.batch_size = 48
    sampler.steps = 50

Resolution order is defaults, then the config file, then command-line flags.
A resolved copy is written into every run directory so the run can be
repeated exactly.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .data import DEFAULT_BANDS
from .pipeline import SamplerSettings
from .training import StageOneConfig, StageTwoConfig

CONFIG_FILENAME = "run_config.txt"
MODEL_SIZES = ("full", "desk", "tiny")

# short names accepted in config files and flags
ALIASES = {"lr": "learning_rate", "uncond": "uncond_rate"}
# settings that accept "none"
NULLABLE = {"sampler.clamp"}


class ConfigError(ValueError):
    pass


@dataclass
class DataSettings:
    clips: int = 200
    frames: int = 60
    beat_period_range: tuple[int, int] = (8, 20)
    amplitude_range: tuple[float, float] = (0.3, 1.0)
    n_bands: int = DEFAULT_BANDS
    seed: int = 0


@dataclass
class MetricSettings:
    diversity_samples: int = 500
    diversity_seed: int = 0


@dataclass
class ModelSettings:
    size: str = "full"

    def __post_init__(self):
        if self.size not in MODEL_SIZES:
            raise ValueError(f"model size must be one of {MODEL_SIZES}, got {self.size!r}")


@dataclass
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    stage1: StageOneConfig = field(default_factory=StageOneConfig)
    stage2: StageTwoConfig = field(default_factory=StageTwoConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    seed: int = 0

    SECTIONS = ("data", "model", "stage1", "stage2", "sampler", "metrics")

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Return a copy with ``{"section.key": value}`` applied (``None`` values skipped)."""
        parts = {s: dataclasses.asdict(getattr(self, s)) for s in self.SECTIONS}
        seed = self.seed
        for dotted, value in overrides.items():
            if value is None:
                continue
            if dotted == "seed":
                seed = int(value)
                continue
            section, key = _split_key(dotted)
            if key not in parts[section]:
                raise ConfigError(f"unknown setting {dotted!r}")
            parts[section][key] = _coerce(parts[section][key], value, dotted)
        try:
            return RunConfig(
                data=DataSettings(**parts["data"]),
                model=ModelSettings(**parts["model"]),
                stage1=StageOneConfig(**parts["stage1"]),
                stage2=StageTwoConfig(**parts["stage2"]),
                sampler=SamplerSettings(**parts["sampler"]),
                metrics=MetricSettings(**parts["metrics"]),
                seed=seed,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section in self.SECTIONS:
            for key, value in dataclasses.asdict(getattr(self, section)).items():
                lines.append(f"{section}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def write(self, run_dir: str | Path) -> Path:
        path = Path(run_dir) / CONFIG_FILENAME
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",))
        parser.optionxform = str  # keep key case
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        return cls().with_overrides(dict(parser["run"]))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def _split_key(dotted: str) -> tuple[str, str]:
    section, _, key = dotted.partition(".")
    if section not in RunConfig.SECTIONS or not key:
        raise ConfigError(f"unknown setting {dotted!r}; keys look like 'stage1.lr'")
    return section, ALIASES.get(key, key)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ":".join(str(v) for v in value)
    return "none" if value is None else str(value)


def parse_range(text: str, kind=int) -> tuple:
    lo, sep, hi = str(text).partition(":")
    if not sep:
        raise ConfigError(f"expected a range like '8:20', got {text!r}")
    try:
        lo_v, hi_v = kind(lo), kind(hi)
    except ValueError as exc:
        raise ConfigError(f"bad range {text!r}") from exc
    if lo_v > hi_v:
        raise ConfigError(f"empty range {text!r}")
    return lo_v, hi_v


def _coerce(default, value, name: str):
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    text = value.strip()
    if name in NULLABLE and text.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return parse_range(text, type(default[0]))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if default is None:
            return None if text.lower() == "none" else float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return text
