"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment.  Tuples are written as
comma-separated integers; ``none`` clears an optional value.  Unknown keys
are rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = ""
    subjects: int = 20
    test_subjects: int = 5
    identity_iterations: int = 200
    identity_batch_size: int = 32
    identity_lr: float = 1e-3
    identity_channels: tuple[int, ...] = (8, 16, 16, 32, 32)
    embedding_dim: int = 64

    def items(self) -> list[tuple[str, object]]:
        out = [(f.name, getattr(self.train, f.name)) for f in fields(TrainConfig)]
        out += [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "train"]
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if raw.lower() == "none":
            if key in ("sigma", "clip_norm"):
                return None
            raise ConfigError(f"{key} cannot be none")
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ConfigError(f"{key}: expected true or false, got {raw!r}")
            return raw.lower() == "true"
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        return raw
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    defaults = dict(base.items())
    train_keys = {f.name for f in fields(TrainConfig)}
    train_updates, run_updates = {}, {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        value = _parse_value(key, raw, defaults[key])
        (train_updates if key in train_keys else run_updates)[key] = value
    if "image_size" in train_updates and "sigma" not in train_updates:
        train_updates["sigma"] = None  # re-derive from the new size
    try:
        train = dataclasses.replace(base.train, **train_updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return dataclasses.replace(base, train=train, **run_updates)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
