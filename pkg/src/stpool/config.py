"""Flat key=value config files and named deterministic RNG substreams."""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigError


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped.

    Keys must be unique. Values keep internal whitespace but are stripped at
    both ends.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_kv_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), origin=path)


def format_kv(entries: dict[str, object]) -> str:
    """Serialize a mapping as key = value lines, in the given order."""
    return "".join(f"{key} = {value}\n" for key, value in entries.items())


def parse_int(entries: dict[str, str], key: str, origin: str) -> int:
    try:
        return int(entries[key])
    except ValueError:
        raise ConfigError(f"{origin}: key {key!r} must be an integer, got {entries[key]!r}")


def parse_float(entries: dict[str, str], key: str, origin: str) -> float:
    try:
        return float(entries[key])
    except ValueError:
        raise ConfigError(f"{origin}: key {key!r} must be a number, got {entries[key]!r}")


def substream(seed: int, name: str) -> np.random.Generator:
    """Deterministic named RNG stream derived from one root seed.

    Distinct names give independent streams; the same (seed, name) pair gives
    the same stream on every platform.
    """
    seed = int(seed)
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))
