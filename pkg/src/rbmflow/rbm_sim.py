"""Reflected Brownian motion by Euler steps with nearest-point projection.

One step proposes ``y = x + dB``; a proposal outside the domain is pushed to
its nearest boundary point and the pushed distance is the local-time
increment. All flows driven by one :class:`DrivingNoise` see bit-identical
increments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .geometry import Domain

__all__ = [
    "StepSizeError",
    "BudgetError",
    "InsufficientPathError",
    "DrivingNoise",
    "ReflectedPath",
    "reflect",
    "step_reflect",
    "simulate_path",
    "simulate_flow",
    "run_flows",
    "FlowBatchResult",
    "inverse_local_time",
]

BLOCK = 4096
DEFAULT_BUDGET = 10_000_000


class StepSizeError(RuntimeError):
    """A proposal left the domain by more than the reach; halve ``dt``."""


class BudgetError(RuntimeError):
    """The step budget ran out before the local-time target was reached."""


class InsufficientPathError(ValueError):
    """The path does not accumulate the requested local time."""


@dataclass(frozen=True)
class DrivingNoise:
    """Gaussian increments with covariance ``dt * I`` per step.

    The stream is a pure function of ``(seed, dt, dim, substeps)``. With
    ``substeps = k`` each increment is the sum of ``k`` consecutive
    increments of ``DrivingNoise(seed, dt / k, dim)``, so a coarse and a fine
    noise with the same seed sample one Brownian path at two resolutions.
    """

    seed: int
    dt: float
    dim: int
    substeps: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    def blocks(self) -> Iterator[np.ndarray]:
        """Consecutive ``(BLOCK, dim)`` arrays of increments, forever."""
        rng = np.random.default_rng(self.seed)
        k = self.substeps
        scale = math.sqrt(self.dt / k)
        while True:
            z = rng.standard_normal((BLOCK * k, self.dim)) * scale
            if k > 1:
                z = z.reshape(BLOCK, k, self.dim).sum(axis=1)
            yield z

    def increments(self, n_steps: int) -> np.ndarray:
        """The first ``n_steps`` increments as an ``(n_steps, dim)`` array."""
        out = []
        have = 0
        for b in self.blocks():
            if have >= n_steps:
                break
            out.append(b)
            have += len(b)
        if not out:
            return np.zeros((0, self.dim))
        return np.concatenate(out)[:n_steps]

    def coarsened(self, factor: int) -> "DrivingNoise":
        """Same Brownian path sampled every ``factor`` steps."""
        return DrivingNoise(self.seed, self.dt * factor, self.dim, self.substeps * factor)


@dataclass
class ReflectedPath:
    """Discretised reflected trajectory with boundary local time.

    ``positions[k]``, ``local_time[k]`` and ``contact[k]`` refer to time
    ``k * dt``; ``contact[k]`` is true iff the projection was applied on the
    step that produced ``positions[k]``.
    """

    start: np.ndarray
    dt: float
    positions: np.ndarray
    local_time: np.ndarray
    contact: np.ndarray
    seed: int | None = None
    sigma_index: int | None = None

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.positions))

    @property
    def n_steps(self) -> int:
        return len(self.positions) - 1

    @property
    def noise_ref(self) -> tuple[int | None, float]:
        return (self.seed, self.dt)

    @property
    def sigma_time(self) -> float | None:
        return None if self.sigma_index is None else self.sigma_index * self.dt


def reflect(dom: Domain, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project proposals ``y`` (any leading shape) back into the closed domain.

    Returns ``(positions, dl, contact)``.
    """
    out = np.array(y, dtype=float, copy=True)
    contact = dom.phi(out) > 0
    dl = np.zeros(contact.shape)
    if contact.any():
        yo = out[contact]
        p = dom.nearest(yo)
        d = np.sqrt(np.sum((yo - p) ** 2, axis=-1))
        if d.max() > dom.reach:
            raise StepSizeError(
                f"proposal exits the domain by {d.max():.3g} > reach {dom.reach:.3g}; halve dt"
            )
        out[contact] = p
        dl[contact] = d
    return out, dl, contact


def step_reflect(dom: Domain, x, db) -> tuple[np.ndarray, float]:
    """One Euler step with projection: ``(next point, local-time increment)``."""
    y = np.asarray(x, dtype=float) + np.asarray(db, dtype=float)
    pos, dl, _ = reflect(dom, y[None, :])
    return pos[0], float(dl[0])


def _check_starts(dom: Domain, starts: np.ndarray) -> None:
    if np.any(dom.phi(starts) > dom.tol_bdry):
        raise ValueError("start point lies outside the closed domain")


@dataclass
class FlowBatchResult:
    """Outcome of :func:`run_flows` for a batch of replicas.

    ``endpoints[i]`` holds every path of replica ``i`` at the stopping step
    ``sigma_index[i]`` (``-1`` and NaNs for replicas that failed);
    ``base_paths[i]`` is the recorded base path when requested.
    """

    endpoints: np.ndarray
    sigma_index: np.ndarray
    final_local_time: np.ndarray
    errors: list[str | None]
    base_paths: list[ReflectedPath | None] = field(default_factory=list)


def run_flows(
    dom: Domain,
    starts: np.ndarray,
    noises: Sequence[DrivingNoise],
    *,
    r: float | None = None,
    n_steps: int | None = None,
    budget: int = DEFAULT_BUDGET,
    record_base: bool = False,
    observer: Callable[..., None] | None = None,
) -> FlowBatchResult:
    """Simulate synchronous flows for several independent replicas at once.

    ``starts`` has shape ``(R, P, n)``: replica ``i`` runs ``P`` paths from
    ``starts[i]``, all driven by ``noises[i]``. Path 0 is the base path.
    With ``r`` the replica stops at the first step where the base local time
    reaches ``r``; with ``n_steps`` every replica runs exactly that many
    steps. ``observer(ids, X_prev, dB, X, dl, contact)`` is called after
    every step with the active replica ids, the state before the step, the
    increments and the new state.
    """
    starts = np.asarray(starts, dtype=float)
    R, P, n = starts.shape
    if len(noises) != R:
        raise ValueError("need one noise per replica")
    if (r is None) == (n_steps is None):
        raise ValueError("give exactly one of r or n_steps")
    if r is not None and r < 0:
        raise ValueError("target local time must be nonnegative")
    dt = noises[0].dt if R else 1.0
    _check_starts(dom, starts.reshape(-1, n))
    limit = n_steps if n_steps is not None else budget

    endpoints = np.full((R, P, n), np.nan)
    sigma = np.full(R, -1, dtype=np.int64)
    final_L = np.zeros((R, P))
    errors: list[str | None] = [None] * R
    base_rec: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = [[] for _ in range(R)]

    X = starts.copy()
    L = np.zeros((R, P))
    ids = np.arange(R)
    streams = [noise.blocks() for noise in noises]
    if r is not None and r == 0:
        endpoints[:] = starts
        sigma[:] = 0
        ids = ids[:0]

    step = 0
    while len(ids) and step < limit:
        block_start = step
        block = np.stack([next(streams[i]) for i in ids], axis=0)  # (Ra, BLOCK, n)
        nb = min(BLOCK, limit - step)
        if record_base:
            bpos = np.empty((len(ids), nb, n))
            bL = np.empty((len(ids), nb))
            bc = np.empty((len(ids), nb), dtype=bool)
        finished = np.zeros(len(ids), dtype=bool)
        used = nb
        for j in range(nb):
            db = block[:, j, None, :]
            try:
                Xn, dl, c = reflect(dom, X + db)
            except StepSizeError as exc:
                # isolate the offending replicas and keep the rest
                Xn = np.empty_like(X)
                dl = np.zeros(L.shape)
                c = np.zeros(L.shape, dtype=bool)
                for a in range(len(ids)):
                    if finished[a]:
                        Xn[a] = X[a]
                        continue
                    try:
                        Xn[a], dl[a], c[a] = reflect(dom, X[a] + block[a, j])
                    except StepSizeError:
                        errors[ids[a]] = str(exc)
                        finished[a] = True
                        Xn[a] = X[a]
            X_prev, X = X, Xn
            L = L + dl
            step += 1
            if record_base:
                bpos[:, j] = X[:, 0]
                bL[:, j] = L[:, 0]
                bc[:, j] = c[:, 0]
            if observer is not None:
                observer(ids, X_prev, db, X, dl, c)
            if r is not None:
                hit = (L[:, 0] >= r) & ~finished
                if hit.any():
                    endpoints[ids[hit]] = X[hit]
                    sigma[ids[hit]] = step
                    final_L[ids[hit]] = L[hit]
                    finished |= hit
                    if finished.all():
                        used = j + 1
                        break
        if record_base:
            for a, i in enumerate(ids):
                # replicas that stopped inside the block keep only their own steps
                u = sigma[i] - block_start if sigma[i] >= block_start else used
                base_rec[i].append((bpos[a, :u], bL[a, :u], bc[a, :u]))
        keep = ~finished
        ids, X, L = ids[keep], X[keep], L[keep]

    if n_steps is not None and len(ids):
        endpoints[ids] = X
        sigma[ids] = step
        final_L[ids] = L
    elif len(ids):
        for i in ids:
            if errors[i] is None:
                errors[i] = f"budget of {budget} steps exhausted before local time {r}"

    base_paths: list[ReflectedPath | None] = []
    if record_base:
        for i in range(R):
            if errors[i] is not None:
                base_paths.append(None)
                continue
            parts = base_rec[i]
            pos = np.concatenate([starts[i, 0][None]] + [p for p, _, _ in parts])
            lt = np.concatenate([[0.0]] + [l for _, l, _ in parts])
            con = np.concatenate([[False]] + [c for _, _, c in parts])
            base_paths.append(
                ReflectedPath(
                    start=starts[i, 0].copy(),
                    dt=dt,
                    positions=pos,
                    local_time=lt,
                    contact=con,
                    seed=noises[i].seed,
                    sigma_index=int(sigma[i]) if r is not None else None,
                )
            )
    return FlowBatchResult(endpoints, sigma, final_L, errors, base_paths)


def simulate_flow(
    dom: Domain,
    starts,
    noise: DrivingNoise,
    *,
    r: float | None = None,
    t_max: float | None = None,
    budget: int = DEFAULT_BUDGET,
) -> list[ReflectedPath]:
    """Full trajectories of several starts under one driving noise.

    With ``r`` every path is stopped at the inverse local time of the first
    path. With ``t_max`` all paths run ``round(t_max / dt)`` steps.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    P, n = starts.shape
    if n != noise.dim:
        raise ValueError("noise dimension does not match the domain")
    _check_starts(dom, starts)
    if (r is None) == (t_max is None):
        raise ValueError("give exactly one of r or t_max")
    if r is not None and r < 0:
        raise ValueError("target local time must be nonnegative")
    limit = budget if t_max is None else int(round(t_max / noise.dt))

    pos = [starts[None]]
    lts = [np.zeros((1, P))]
    cons = [np.zeros((1, P), dtype=bool)]
    X = starts.copy()
    L = np.zeros(P)
    step = 0
    sigma = 0 if (r is not None and r == 0) else None
    for block in noise.blocks():
        if sigma is not None or step >= limit:
            break
        nb = min(len(block), limit - step)
        bp = np.empty((nb, P, n))
        bl = np.empty((nb, P))
        bc = np.empty((nb, P), dtype=bool)
        used = nb
        for j in range(nb):
            X, dl, c = reflect(dom, X + block[j])
            L = L + dl
            step += 1
            bp[j], bl[j], bc[j] = X, L, c
            if r is not None and L[0] >= r:
                sigma = step
                used = j + 1
                break
        pos.append(bp[:used])
        lts.append(bl[:used])
        cons.append(bc[:used])
    if r is not None and sigma is None:
        raise BudgetError(f"budget of {budget} steps exhausted before local time {r}")
    positions = np.concatenate(pos)
    local_time = np.concatenate(lts)
    contact = np.concatenate(cons)
    return [
        ReflectedPath(
            start=starts[p].copy(),
            dt=noise.dt,
            positions=positions[:, p].copy(),
            local_time=local_time[:, p].copy(),
            contact=contact[:, p].copy(),
            seed=noise.seed,
            sigma_index=sigma,
        )
        for p in range(P)
    ]


def simulate_path(
    dom: Domain,
    start,
    noise: DrivingNoise,
    *,
    r: float | None = None,
    t_max: float | None = None,
    budget: int = DEFAULT_BUDGET,
) -> ReflectedPath:
    """Single reflected path up to time ``t_max`` or inverse local time ``r``."""
    return simulate_flow(dom, [start], noise, r=r, t_max=t_max, budget=budget)[0]


def inverse_local_time(path: ReflectedPath, r: float) -> int:
    """Smallest step index ``k`` with ``L_k >= r``."""
    if r < 0:
        raise ValueError("r must be nonnegative")
    L = path.local_time
    if r > L[-1]:
        raise InsufficientPathError(f"path reaches local time {L[-1]:.6g} < {r:.6g}")
    return int(np.searchsorted(L, r, side="left"))
