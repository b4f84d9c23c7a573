"""Flat ``key = value`` configuration files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from ..fewshot.config import TrainConfig, coerce


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def build_train_config(file_values: Mapping[str, str] | None = None,
                       overrides: Mapping[str, object] | None = None) -> TrainConfig:
    """File values first, then overrides (``None`` overrides are ignored)."""
    merged: dict[str, object] = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            try:
                merged[key] = coerce(key, value)
            except KeyError:
                raise ConfigError(f"unknown config key {key!r}") from None
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
