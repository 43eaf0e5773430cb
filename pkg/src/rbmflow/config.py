"""Experiment configuration and summary statistics."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    domain: str = "ball:r=1.0"
    dt: float = 1e-4
    r: float = 0.5
    eps: tuple[float, ...] = (0.1, 0.03, 0.01)
    c0: float = 1.0
    replicas: int = 200
    seed: int = 0
    directions: int | None = None
    out: Path | None = None
    budget: int = 10_000_000
    start: tuple[float, ...] | None = None
    workers: int = 1
    batch: int = 25
    # subcommand-specific
    thresholds: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4)
    steps: int = 100_000
    t_max: float = 1.0
    dts: tuple[float, ...] | None = None
    gzip: bool = False

    def __post_init__(self):
        self.eps = tuple(float(e) for e in self.eps)
        self.thresholds = tuple(float(b) for b in self.thresholds)
        if self.dts is not None:
            self.dts = tuple(float(d) for d in self.dts)
        if self.start is not None:
            self.start = tuple(float(s) for s in self.start)
        if self.out is not None:
            self.out = Path(self.out)
        self.validate()

    def validate(self) -> None:
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.r > 0:
            raise ConfigError("r must be positive")
        if not self.eps or any(e <= 0 for e in self.eps):
            raise ConfigError("eps values must be strictly positive")
        if list(self.eps) != sorted(self.eps, reverse=True) or len(set(self.eps)) != len(self.eps):
            raise ConfigError("eps values must be strictly descending")
        if self.c0 < 0:
            raise ConfigError("c0 must be nonnegative")
        if self.budget < 1 or self.batch < 1 or self.workers < 1:
            raise ConfigError("budget, batch and workers must be >= 1")
        if self.directions is not None and self.directions < 1:
            raise ConfigError("directions must be >= 1")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["out"] = None if self.out is None else str(self.out)
        return d


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def load_config(path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a TOML file (flat table or an ``[experiment]`` table) and apply overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        data = data.get("experiment", data)
        unknown = set(data) - _FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(data)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    median: float
    stderr: float
    count: int

    @classmethod
    def of(cls, values: Sequence[float]) -> "SummaryStats":
        v = np.asarray(values, dtype=float)
        n = len(v)
        if n == 0:
            return cls(float("nan"), float("nan"), float("nan"), 0)
        se = float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(v.mean()), float(np.median(v)), se, n)

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)
