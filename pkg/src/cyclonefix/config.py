"""Plain-text ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Keys may repeat only when read
with :func:`read_multi`. Values stay strings; typed access goes through the
``get_*`` helpers of :class:`Config`.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DataError

# every key any subcommand reads, with its default, for --help and manifests
KNOWN_KEYS = {
    "steering.radius_deg": "5.0",
    "steering.weights": "0.25,0.35,0.40",
    "extrapolate.alpha": "0.5",
    "refine.box_schedule": "3.0,1.5,0.75",
    "density.sigma_deg": "0.25",
    "density.radius_deg": "0.75",
    "density.metric": "greatcircle",
    "intensity.p": "4",
    "intensity.N": "0",
    "intensity.window_cells": "64",
    "intensity.basin": "WP",
}


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise DataError(f"{source}:{n}: empty key")
        pairs.append((key, value.strip()))
    return pairs


def read_multi(path) -> list[tuple[str, str]]:
    return parse_pairs(Path(path).read_text(encoding="utf-8"), str(path))


class Config:
    def __init__(self, values: Mapping[str, str] | None = None):
        self.values = dict(values or {})

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "Config":
        values = {}
        for key, value in parse_pairs(text, source):
            if key in values:
                raise DataError(f"{source}: duplicate key {key!r}")
            values[key] = value
        return cls(values)

    @classmethod
    def load(cls, path) -> "Config":
        if path is None:
            return cls()
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def merged(self, overrides: Mapping[str, str]) -> "Config":
        out = dict(self.values)
        out.update({k: str(v) for k, v in overrides.items() if v is not None})
        return Config(out)

    def get(self, key: str, default=None) -> str:
        if key in self.values:
            return self.values[key]
        if default is not None:
            return str(default)
        return KNOWN_KEYS[key]

    def get_float(self, key: str, default=None) -> float:
        try:
            return float(self.get(key, default))
        except ValueError:
            raise DataError(f"config key {key}: not a number: {self.get(key, default)!r}") from None

    def get_int(self, key: str, default=None) -> int:
        try:
            return int(self.get(key, default))
        except ValueError:
            raise DataError(f"config key {key}: not an integer: {self.get(key, default)!r}") from None

    def get_floats(self, key: str, default=None) -> tuple[float, ...]:
        text = self.get(key, default)
        try:
            return tuple(float(x) for x in text.split(",") if x.strip())
        except ValueError:
            raise DataError(f"config key {key}: not a number list: {text!r}") from None

    def effective(self, keys: Iterable[str]) -> dict[str, str]:
        return {k: self.get(k) for k in keys}

    def dumps(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()
