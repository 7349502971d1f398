"""Run configuration: one JSON document with ``train``, ``model``, ``synth`` and ``kts`` sections.

Unknown keys are rejected. The resolved form always spells out every field.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data_io import SynthSpec
from .training import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class KtsConfig:
    c_penalty: float = 1.0
    m_max: int | None = None  # None: number of frames

    def validate(self) -> None:
        if self.c_penalty < 0:
            raise ValueError("kts.c_penalty must be non-negative")
        if self.m_max is not None and self.m_max < 1:
            raise ValueError("kts.m_max must be positive")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    kts: KtsConfig = field(default_factory=KtsConfig)
    synth: SynthSpec | None = None

    def to_dict(self) -> dict:
        return {
            "train": dataclasses.asdict(self.train),
            "model": dataclasses.asdict(self.model),
            "kts": dataclasses.asdict(self.kts),
            "synth": dataclasses.asdict(self.synth) if self.synth is not None else None,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


_SECTIONS = {"train": TrainConfig, "model": ModelConfig, "kts": KtsConfig, "synth": SynthSpec}


def _build(section: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(section + '.' + k for k in unknown)}")
    missing = [name for name, f in fields.items()
               if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
               and name not in raw]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(section + '.' + k for k in missing)}")
    values = dict(raw)
    for name in ("shots_per_video", "frames_per_shot"):
        if name in values and isinstance(values[name], list):
            values[name] = tuple(values[name])
    try:
        obj = cls(**values)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None
    return obj


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    for section, cls in _SECTIONS.items():
        if raw.get(section) is not None:
            setattr(cfg, section, _build(section, cls, raw[section]))
    return cfg


def load_config(path) -> RunConfig:
    """Read and validate a config file. ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)
