"""Boundary excursions of a discretised reflected path.

In discrete time a step is "on the boundary" iff the projection was applied
(the path's contact flag). An excursion is a maximal run of non-contact
steps strictly between two contact steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rbm_sim import InsufficientPathError, ReflectedPath

__all__ = [
    "NoBoundaryHitError",
    "ExcursionRecord",
    "ExcursionLadder",
    "decompose",
    "build_ladder",
    "TailCounts",
    "excursion_size_counts",
]


class NoBoundaryHitError(ValueError):
    """The path never touches the boundary."""


@dataclass(frozen=True)
class ExcursionRecord:
    start_idx: int
    end_idx: int
    ell: float  # local time at start_idx
    e0: np.ndarray  # left endpoint, position at start_idx
    xk: np.ndarray  # right endpoint, position at end_idx
    size: float  # |e0 - xk|


@dataclass(frozen=True)
class ExcursionLadder:
    """Right endpoints and local-time gaps of the big excursions before ``r``.

    ``points[0]`` is the first boundary hit and ``points[k]`` (k >= 1) the
    right endpoint of the k-th kept excursion; ``dells[k]`` is the local time
    spent with ``points[k]`` as the current anchor.
    """

    x0: np.ndarray
    records: tuple[ExcursionRecord, ...]
    r: float
    eps_star: float
    first_hit_idx: int

    @property
    def m(self) -> int:
        return len(self.records)

    @property
    def ells(self) -> np.ndarray:
        return np.array([0.0] + [rec.ell for rec in self.records] + [self.r])

    @property
    def dells(self) -> np.ndarray:
        return np.diff(self.ells)

    @property
    def points(self) -> np.ndarray:
        return np.array([self.x0] + [rec.xk for rec in self.records])


def decompose(path: ReflectedPath) -> list[ExcursionRecord]:
    """All completed excursions of ``path``, in time order."""
    idx = np.flatnonzero(path.contact)
    if len(idx) == 0:
        raise NoBoundaryHitError("path has no contact steps")
    gaps = np.flatnonzero(np.diff(idx) > 1)
    starts, ends = idx[gaps], idx[gaps + 1]
    pos = path.positions
    sizes = np.linalg.norm(pos[ends] - pos[starts], axis=1) if len(starts) else np.zeros(0)
    return [
        ExcursionRecord(
            start_idx=int(s),
            end_idx=int(e),
            ell=float(path.local_time[s]),
            e0=pos[s].copy(),
            xk=pos[e].copy(),
            size=float(z),
        )
        for s, e, z in zip(starts, ends, sizes)
    ]


def build_ladder(
    path: ReflectedPath,
    records: Sequence[ExcursionRecord] | None,
    eps_star: float,
    r: float,
) -> ExcursionLadder:
    """Keep excursions of size ``>= eps_star`` that start before local time ``r``."""
    if path.local_time[-1] < r:
        raise InsufficientPathError(
            f"path reaches local time {path.local_time[-1]:.6g} < {r:.6g}"
        )
    if records is None:
        records = decompose(path)
    idx = np.flatnonzero(path.contact)
    if len(idx) == 0:
        raise NoBoundaryHitError("path has no contact steps")
    first = int(idx[0])
    kept = tuple(rec for rec in records if rec.size >= eps_star and rec.ell < r)
    return ExcursionLadder(
        x0=path.positions[first].copy(),
        records=kept,
        r=float(r),
        eps_star=float(eps_star),
        first_hit_idx=first,
    )


@dataclass
class TailCounts:
    """Excursion counts per unit local time, one entry per threshold."""

    thresholds: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    replicas: int

    @property
    def ci_low(self) -> np.ndarray:
        return self.mean - 1.96 * self.stderr

    @property
    def ci_high(self) -> np.ndarray:
        return self.mean + 1.96 * self.stderr

    def loglog_slope(self) -> tuple[float, float]:
        """Least-squares slope of log(count) against log(threshold) and its s.e."""
        ok = self.mean > 0
        x = np.log(self.thresholds[ok])
        y = np.log(self.mean[ok])
        if len(x) < 2:
            return float("nan"), float("nan")
        coef = np.polyfit(x, y, 1)
        # delta method: s.e. of log(mean) is stderr/mean
        rel = self.stderr[ok] / self.mean[ok]
        xc = x - x.mean()
        se = float(np.sqrt(np.sum((xc / np.sum(xc**2)) ** 2 * rel**2)))
        return float(coef[0]), se


def excursion_size_counts(
    ladders: Sequence[ExcursionLadder], thresholds: Sequence[float], min_replicas: int = 30
) -> TailCounts:
    """Mean number of excursions with size ``>= b`` per unit local time.

    The ladders should be built with ``eps_star = 0`` so that every
    completed excursion before ``r`` is present.
    """
    if len(ladders) < min_replicas:
        raise ValueError(f"need at least {min_replicas} replicas, got {len(ladders)}")
    b = np.asarray(sorted(thresholds), dtype=float)
    counts = np.empty((len(ladders), len(b)))
    for i, lad in enumerate(ladders):
        sizes = np.sort([rec.size for rec in lad.records])
        counts[i] = (len(sizes) - np.searchsorted(sizes, b, side="left")) / lad.r
    R = len(ladders)
    mean = counts.mean(axis=0) if R else np.zeros(len(b))
    se = counts.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.full(len(b), np.nan)
    return TailCounts(thresholds=b, mean=mean, stderr=se, replicas=R)
