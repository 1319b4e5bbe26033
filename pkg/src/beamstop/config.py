"""Flat ``key = value`` run configuration and named random streams."""
from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, name); e.g. "data", "init", "shuffle"."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def stream_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**31 - 1))


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items()))
