"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key must be known; values
are parsed to the type of the key's default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .trainer import CurriculumSchedule, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class DataConfig:
    train_per_task: int = 64
    eval_per_task: int = 8


_SECTIONS = (TrainConfig, CurriculumSchedule, DataConfig)
_TYPES: dict[str, type] = {}
_OPTIONAL_FLOAT = {"fixed_sigma"}
for _cls in _SECTIONS:
    for _f in fields(_cls):
        _TYPES[_f.name] = type(_f.default) if _f.name not in _OPTIONAL_FLOAT else float

KNOWN_KEYS = tuple(_TYPES)


def _coerce(key: str, raw: str):
    typ = _TYPES[key]
    raw = raw.strip()
    if key in _OPTIONAL_FLOAT and raw.lower() in ("", "none"):
        return None
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}", key) from None


def parse_config(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})", key)
        values[key] = _coerce(key, raw)
    return values


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_config(fh.read())


def build(values: dict) -> tuple[TrainConfig, CurriculumSchedule, DataConfig]:
    for key in values:
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}", key)
    parts = []
    for cls in _SECTIONS:
        names = {f.name for f in fields(cls)}
        parts.append(cls(**{k: v for k, v in values.items() if k in names}))
    return tuple(parts)  # type: ignore[return-value]


def dump_config(train: TrainConfig, schedule: CurriculumSchedule, data: DataConfig) -> str:
    lines = []
    for obj in (train, schedule, data):
        for f in fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
