"""Run configuration with a lossless ``key = value`` text form.

Each section maps onto one frozen dataclass; values are written as JSON
literals, so floats keep their full ``repr`` precision and a config read back
from disk compares equal to the one that was written.
"""

from __future__ import annotations

import configparser
import io
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from seqlidar.codec import SensorConfig
from seqlidar.diffusion import DEFAULT_STEPS
from seqlidar.errors import ConfigurationError
from seqlidar.net import NetConfig
from seqlidar.scene import WorldParams
from seqlidar.train import TrainConfig


@dataclass(frozen=True)
class SamplerSection:
    steps: int = DEFAULT_STEPS
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    frames: int = 4
    count: int = 8
    seed: int = 0


@dataclass(frozen=True)
class PathSection:
    data: str = "data"
    run: str = "run"


SECTIONS = {
    "sensor": SensorConfig,
    "world": WorldParams,
    "model": NetConfig,
    "train": TrainConfig,
    "sampler": SamplerSection,
    "data": DataSection,
    "paths": PathSection,
}


@dataclass(frozen=True)
class RunConfig:
    sensor: SensorConfig = field(default_factory=SensorConfig)
    world: WorldParams = field(default_factory=WorldParams)
    model: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathSection = field(default_factory=PathSection)

    def to_text(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: json.dumps(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        unknown = set(parser.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, kind in SECTIONS.items():
            values = dict(parser[name]) if parser.has_section(name) else {}
            kwargs[name] = _build(kind, values, name)
        return cls(**kwargs)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def override(self, assignments):
        """Apply ``section.key=value`` strings (values parsed as JSON, else kept as text)."""
        updates = {}
        for item in assignments:
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or section not in SECTIONS:
                raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
            updates.setdefault(section, {})[name] = raw.strip() if _is_bare(raw) else json.dumps(json.loads(raw))
        changed = {}
        for section, values in updates.items():
            current = {f.name: json.dumps(getattr(getattr(self, section), f.name))
                       for f in fields(getattr(self, section))}
            current.update(values)
            changed[section] = _build(SECTIONS[section], current, section)
        return replace(self, **changed)


def _is_bare(raw):
    try:
        json.loads(raw)
    except json.JSONDecodeError:
        return True
    return False


def _build(kind, values, section):
    known = {f.name: f for f in fields(kind)}
    extra = set(values) - set(known)
    if extra:
        raise ConfigurationError(f"[{section}] unknown keys: {sorted(extra)}")
    defaults = kind()
    kwargs = {}
    for name, raw in values.items():
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(getattr(defaults, name), tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return kind(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{section}] {exc}") from exc
