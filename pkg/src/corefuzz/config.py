"""Strict JSON configuration for checking runs."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .backends import ConfigError
from .player import PlayerSettings
from .snapshot import DEFAULT_FLAGS_MASK, format_flags, parse_flags_mask


@dataclass(frozen=True)
class CheckConfig:
    batch_size: int = 50
    list_length: int = 1000
    window_cores: int = 4
    window_ms: float = 120_000.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.list_length < self.batch_size:
            raise ConfigError("list_length must be >= batch_size")
        if self.window_cores < 1:
            raise ConfigError("window_cores must be >= 1")
        if self.window_ms <= 0:
            raise ConfigError("window_ms must be > 0")


@dataclass(frozen=True)
class RunConfig:
    check: CheckConfig = CheckConfig()
    player: PlayerSettings = PlayerSettings()
    determinism_replays: int = 8

    def to_json(self) -> dict[str, Any]:
        c = self.check
        return {
            "batch_size": c.batch_size,
            "list_length": c.list_length,
            "window_cores": c.window_cores,
            "window_ms": c.window_ms,
            "rng_seed": c.rng_seed,
            "cpu_time_limit_ms": self.player.cpu_time_limit_ms,
            "flags_mask": format_flags(self.player.flags_mask),
            "determinism_replays": self.determinism_replays,
        }


_INT_KEYS = {
    "batch_size", "list_length", "window_cores", "rng_seed", "determinism_replays", "cpu_time_limit_ms",
}
_NUM_KEYS = {"window_ms"}
KNOWN_KEYS = _INT_KEYS | _NUM_KEYS | {"flags_mask"}


def config_from_json(doc: Any) -> RunConfig:
    """Build a RunConfig from a parsed JSON object; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for k in _INT_KEYS & set(doc):
        if isinstance(doc[k], bool) or not isinstance(doc[k], int):
            raise ConfigError(f"{k} must be an integer")
    for k in _NUM_KEYS & set(doc):
        if isinstance(doc[k], bool) or not isinstance(doc[k], (int, float)):
            raise ConfigError(f"{k} must be a number")
    mask = DEFAULT_FLAGS_MASK
    if "flags_mask" in doc:
        if not isinstance(doc["flags_mask"], str):
            raise ConfigError("flags_mask must be a string such as \"CF|ZF|SF|OF\"")
        try:
            mask = parse_flags_mask(doc["flags_mask"])
        except ValueError as e:
            raise ConfigError(f"flags_mask: {e}") from None
    check_keys = {f.name for f in fields(CheckConfig)}
    check = CheckConfig(**{k: v for k, v in doc.items() if k in check_keys})
    cpu = doc.get("cpu_time_limit_ms", PlayerSettings.cpu_time_limit_ms)
    if cpu <= 0:
        raise ConfigError("cpu_time_limit_ms must be > 0")
    replays = doc.get("determinism_replays", 8)
    if replays < 1:
        raise ConfigError("determinism_replays must be >= 1")
    return RunConfig(check, PlayerSettings(cpu_time_limit_ms=cpu, flags_mask=mask), replays)


def parse_config(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_json(doc)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())
