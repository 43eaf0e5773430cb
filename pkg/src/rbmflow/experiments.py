"""Seeded Monte Carlo experiments.

Replica ``i`` always uses seed ``base_seed + i``. Replicas are simulated in
batches; batches may run in worker processes and are merged in index order,
so outputs do not depend on ``workers``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig, SummaryStats
from .derivative import (
    curvature_product_2d,
    direction_set,
    endpoint_product_2d,
    flow_derivative_report,
    multiplicative_functional,
    rank_profile,
)
from .excursion import build_ladder, decompose, excursion_size_counts
from .geometry import Domain, parse_domain, sample_interior
from .rbm_sim import DrivingNoise, run_flows

log = logging.getLogger(__name__)

FLOW_COLUMNS = ["eps", "eps_star", "dt", "seed", "r", "sup_err", "norm_A", "sv_min", "sv_next"]
ERROR_BUDGET = 0.10
REL_GAP_FLOOR = 1e-14
# floating-point slack for "nonincreasing" distance under projection
CONTRACTION_RTOL = 1e-12


def _batches(n: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _map(fn: Callable, tasks: Sequence, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _start(cfg: ExperimentConfig, dom: Domain) -> np.ndarray:
    if cfg.start is None:
        return dom.default_start()
    z = np.asarray(cfg.start, dtype=float)
    if z.shape != (dom.dim,):
        raise ConfigError(f"start must have {dom.dim} coordinates")
    return z


def _noises(cfg: ExperimentConfig, dom: Domain, lo: int, hi: int) -> list[DrivingNoise]:
    return [DrivingNoise(cfg.seed + i, cfg.dt, dom.dim) for i in range(lo, hi)]


# -- flow derivative ----------------------------------------------------------


@dataclass
class FlowDerivativeResult:
    rows: list[list]
    summary: dict[float, SummaryStats]
    cauchy: dict[str, SummaryStats]
    failures: int
    replicas: int

    @property
    def medians(self) -> list[float]:
        return [self.summary[e].median for e in sorted(self.summary, reverse=True)]

    @property
    def error_fraction(self) -> float:
        return self.failures / self.replicas

    @property
    def decreasing(self) -> bool:
        m = self.medians
        return all(b < a for a, b in zip(m, m[1:]))

    @property
    def halved(self) -> bool:
        m = self.medians
        return len(m) >= 2 and m[-1] < 0.5 * m[0]

    @property
    def passed(self) -> bool:
        return self.error_fraction <= ERROR_BUDGET and self.decreasing and self.halved


def _flow_batch(task) -> tuple[list[list], list[dict[str, float]], int]:
    cfg, lo, hi = task
    dom = parse_domain(cfg.domain)
    z0 = _start(cfg, dom)
    dirs = direction_set(dom, z0, cfg.directions)
    eps = cfg.eps
    starts = [z0[None]] + [z0 + e * dirs for e in eps]
    starts = np.concatenate(starts)
    block = np.broadcast_to(starts, (hi - lo,) + starts.shape).copy()
    res = run_flows(dom, block, _noises(cfg, dom, lo, hi), r=cfg.r, budget=cfg.budget, record_base=True)
    rows, cauchy, failures = [], [], 0
    K = len(dirs)
    for a in range(hi - lo):
        if res.errors[a] is not None:
            log.warning("replica %d failed: %s", lo + a, res.errors[a])
            failures += 1
            continue
        base = res.base_paths[a]
        records = decompose(base)
        ends = res.endpoints[a]
        mats = []
        for j, e in enumerate(eps):
            ladder = build_ladder(base, records, cfg.c0 * e, cfg.r)
            rep = flow_derivative_report(
                dom, ladder, ends[0], ends[1 + j * K : 1 + (j + 1) * K], dirs, e, base.sigma_time
            )
            sv = rep.singular_values
            rows.append(
                [e, ladder.eps_star, cfg.dt, cfg.seed + lo + a, cfg.r, rep.sup_err, sv[0], sv[-1], sv[-2]]
            )
            mats.append(rep.A)
        cauchy.append(
            {
                f"{eps[j]}->{eps[j + 1]}": float(np.linalg.norm(mats[j] - mats[j + 1], 2))
                for j in range(len(eps) - 1)
            }
        )
    return rows, cauchy, failures


def run_flow_derivative(cfg: ExperimentConfig) -> FlowDerivativeResult:
    """Finite-difference flow derivative against the multiplicative functional."""
    tasks = [(cfg, lo, hi) for lo, hi in _batches(cfg.replicas, cfg.batch)]
    rows, cauchy, failures = [], [], 0
    for r_, c_, f_ in _map(_flow_batch, tasks, cfg.workers):
        rows += r_
        cauchy += c_
        failures += f_
    summary = {e: SummaryStats.of([row[5] for row in rows if row[0] == e]) for e in cfg.eps}
    keys = [f"{cfg.eps[j]}->{cfg.eps[j + 1]}" for j in range(len(cfg.eps) - 1)]
    cauchy_stats = {k: SummaryStats.of([c[k] for c in cauchy]) for k in keys}
    result = FlowDerivativeResult(rows, summary, cauchy_stats, failures, cfg.replicas)
    if cfg.out is not None:
        io.write_table(cfg.out / "flow_derivative.csv", FLOW_COLUMNS, rows)
        io.write_json(
            cfg.out / "flow_derivative_summary.json",
            {
                "config": cfg.as_dict(),
                "sup_err": {str(e): s.as_dict() for e, s in summary.items()},
                "cauchy_norm": {k: s.as_dict() for k, s in cauchy_stats.items()},
                "failures": failures,
                "decreasing": result.decreasing,
                "halved": result.halved,
                "passed": result.passed,
            },
        )
    return result


def summarize_flow_csv(path) -> dict[float, SummaryStats]:
    """Recompute the per-eps summary from a raw flow-derivative CSV."""
    rows = io.read_table(path)
    eps = sorted({float(r["eps"]) for r in rows}, reverse=True)
    return {e: SummaryStats.of([float(r["sup_err"]) for r in rows if float(r["eps"]) == e]) for e in eps}


# -- rank profile -------------------------------------------------------------


@dataclass
class RankResult:
    singular_values: np.ndarray  # (replicas * len(eps), n), descending
    failures: int

    @property
    def max_rel_min(self) -> float:
        sv = self.singular_values
        return float(np.max(sv[:, -1] / sv[:, 0]))

    @property
    def min_next(self) -> float:
        return float(np.min(self.singular_values[:, -2]))

    def passed(self, rank_tol: float = 1e-10, next_floor: float = 1e-4) -> bool:
        return self.max_rel_min <= rank_tol and self.min_next > next_floor


def _rank_batch(task):
    cfg, lo, hi = task
    dom = parse_domain(cfg.domain)
    z0 = _start(cfg, dom)
    block = np.broadcast_to(z0, (hi - lo, 1, dom.dim)).copy()
    res = run_flows(dom, block, _noises(cfg, dom, lo, hi), r=cfg.r, budget=cfg.budget, record_base=True)
    out, failures = [], 0
    for a, base in enumerate(res.base_paths):
        if base is None:
            failures += 1
            continue
        records = decompose(base)
        for e in cfg.eps:
            out.append(rank_profile(multiplicative_functional(dom, build_ladder(base, records, cfg.c0 * e, cfg.r))))
    return out, failures


def run_rank_profile(cfg: ExperimentConfig) -> RankResult:
    """Singular values of every assembled functional over replicas and thresholds."""
    tasks = [(cfg, lo, hi) for lo, hi in _batches(cfg.replicas, cfg.batch)]
    svs, failures = [], 0
    for s_, f_ in _map(_rank_batch, tasks, cfg.workers):
        svs += s_
        failures += f_
    return RankResult(np.array(svs), failures)


# -- local-time calibration -----------------------------------------------------


@dataclass
class CalibrationRow:
    dt: float
    mean_raw: float
    se_raw: float
    mean_cv: float
    se_cv: float
    target: float

    @property
    def rel_err(self) -> float:
        return abs(self.mean_cv - self.target) / self.target

    @property
    def rel_err_raw(self) -> float:
        return abs(self.mean_raw - self.target) / self.target


@dataclass
class CalibrationResult:
    rows: list[CalibrationRow]
    replicas: int
    tolerance: float = 0.05

    @property
    def within_tolerance(self) -> bool:
        return all(r.rel_err_raw <= self.tolerance and r.rel_err <= self.tolerance for r in self.rows)

    @property
    def error_shrinks(self) -> bool:
        errs = [r.rel_err for r in sorted(self.rows, key=lambda r: -r.dt)]
        return all(b < a for a, b in zip(errs, errs[1:]))

    @property
    def passed(self) -> bool:
        return self.within_tolerance and self.error_shrinks


def _calibration_batch(task):
    cfg, dts, lo, hi = task
    dom = parse_domain(cfg.domain)
    fine = min(dts)
    starts = np.array(
        [sample_interior(dom, 1, np.random.default_rng([cfg.seed + i, 1]))[0] for i in range(lo, hi)]
    )
    centre = dom.center
    out = {}
    for dt in dts:
        factor = int(round(dt / fine))
        noises = [DrivingNoise(cfg.seed + i, fine, dom.dim).coarsened(factor) for i in range(lo, hi)]
        mart = np.zeros(hi - lo)

        def observe(ids, X_prev, db, X, dl, c, dt=dt):
            # zero-mean martingale increments of |X - centre|^2
            d = db[:, 0, :]
            mart[ids] += 2.0 * np.sum((X_prev[:, 0, :] - centre) * d, axis=1) + np.sum(d * d, axis=1) - dom.dim * dt

        n_steps = int(round(cfg.t_max / dt))
        res = run_flows(dom, starts[:, None, :], noises, n_steps=n_steps, observer=observe)
        out[dt] = (res.final_local_time[:, 0].copy(), mart)
    return out


def run_localtime_calibration(cfg: ExperimentConfig) -> CalibrationResult:
    """Mean boundary local time at ``t_max`` from a uniform start.

    The target is ``t_max * area(dD) / (2 |D|)``. Every step size in
    ``cfg.dts`` (default ``dt`` and ``dt/4``) is driven by the same Brownian
    path per replica. ``mean_cv`` subtracts the fitted multiple of the
    zero-mean martingale part of ``|X - centre|^2``, an unbiased estimator of
    the same mean with smaller variance.
    """
    dom = parse_domain(cfg.domain)
    if not dom.bounded:
        raise ConfigError("local-time calibration needs a bounded domain")
    dts = sorted(cfg.dts if cfg.dts is not None else (cfg.dt, cfg.dt / 4), reverse=True)
    fine = dts[-1]
    for dt in dts:
        k = dt / fine
        if abs(k - round(k)) > 1e-9:
            raise ConfigError("every dt must be an integer multiple of the smallest")
    target = cfg.t_max * dom.surface_area() / (2.0 * dom.volume())
    tasks = [(cfg, dts, lo, hi) for lo, hi in _batches(cfg.replicas, max(cfg.batch, 500))]
    parts = _map(_calibration_batch, tasks, cfg.workers)
    rows = []
    for dt in dts:
        L = np.concatenate([p[dt][0] for p in parts])
        M = np.concatenate([p[dt][1] for p in parts])
        n = len(L)
        cov = np.cov(L, M, ddof=1) if n > 1 else np.zeros((2, 2))
        beta = cov[0, 1] / cov[1, 1] if cov[1, 1] > 0 else 0.0
        adj = L - beta * M
        se = lambda v: float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        rows.append(CalibrationRow(dt, float(L.mean()), se(L), float(adj.mean()), se(adj), target))
    result = CalibrationResult(rows, cfg.replicas)
    if cfg.out is not None:
        io.write_table(
            cfg.out / "localtime_calibration.csv",
            ["dt", "mean_raw", "se_raw", "mean_cv", "se_cv", "target", "rel_err"],
            [[r.dt, r.mean_raw, r.se_raw, r.mean_cv, r.se_cv, r.target, r.rel_err] for r in rows],
        )
        io.write_json(
            cfg.out / "localtime_calibration_summary.json",
            {"config": cfg.as_dict(), "passed": result.passed, "error_shrinks": result.error_shrinks},
        )
    return result


# -- excursion tail -------------------------------------------------------------


@dataclass
class ExcursionStatsResult:
    thresholds: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    slope: float
    slope_se: float
    split_slopes: tuple[float, float]
    split_se: tuple[float, float]
    failures: int
    slope_range: tuple[float, float] = (-1.25, -0.75)

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.mean) <= 0))

    @property
    def split_consistent(self) -> bool:
        a, b = self.split_slopes
        return abs(a - b) <= 1.96 * float(np.hypot(*self.split_se))

    @property
    def passed(self) -> bool:
        lo, hi = self.slope_range
        return lo <= self.slope <= hi and self.monotone


def _ladder_batch(task):
    cfg, lo, hi = task
    dom = parse_domain(cfg.domain)
    z0 = _start(cfg, dom)
    block = np.broadcast_to(z0, (hi - lo, 1, dom.dim)).copy()
    res = run_flows(dom, block, _noises(cfg, dom, lo, hi), r=cfg.r, budget=cfg.budget, record_base=True)
    ladders = [None if p is None else build_ladder(p, None, 0.0, cfg.r) for p in res.base_paths]
    return ladders


def run_excursion_stats(cfg: ExperimentConfig, thresholds: Sequence[float] | None = None) -> ExcursionStatsResult:
    """Counts of excursions of size >= b per unit local time and their log-log slope."""
    dom = parse_domain(cfg.domain)
    b = np.asarray(sorted(thresholds if thresholds is not None else cfg.thresholds), dtype=float)
    if np.any(b <= 0) or np.any(b >= dom.diameter):
        raise ConfigError("thresholds must lie in (0, diam D)")
    tasks = [(cfg, lo, hi) for lo, hi in _batches(cfg.replicas, max(cfg.batch, 100))]
    ladders = [lad for part in _map(_ladder_batch, tasks, cfg.workers) for lad in part]
    ok = [lad for lad in ladders if lad is not None]
    failures = len(ladders) - len(ok)
    min_rep = min(30, len(ok))
    tail = excursion_size_counts(ok, b, min_replicas=min_rep)
    half = len(ok) // 2
    first = excursion_size_counts(ok[:half], b, min_replicas=min(min_rep, half))
    second = excursion_size_counts(ok[half:], b, min_replicas=min(min_rep, half))
    slope, se = tail.loglog_slope()
    s1, se1 = first.loglog_slope()
    s2, se2 = second.loglog_slope()
    result = ExcursionStatsResult(b, tail.mean, tail.stderr, slope, se, (s1, s2), (se1, se2), failures)
    if cfg.out is not None:
        io.write_table(
            cfg.out / "excursion_stats.csv",
            ["b", "count_per_L", "stderr", "ci_low", "ci_high"],
            [[b[i], tail.mean[i], tail.stderr[i], tail.ci_low[i], tail.ci_high[i]] for i in range(len(b))],
        )
        io.write_json(
            cfg.out / "excursion_stats_summary.json",
            {
                "config": cfg.as_dict(),
                "slope": slope,
                "slope_se": se,
                "split_slopes": [s1, s2],
                "split_consistent": result.split_consistent,
                "passed": result.passed,
            },
        )
    return result


# -- contraction ----------------------------------------------------------------


@dataclass
class ContractionResult:
    max_ratio: float  # max_k |X_k - Y_k| / |X_0 - Y_0|
    # max_k (|X_{k+1} - Y_{k+1}| - |X_k - Y_k|) / |X_0 - Y_0|; relative to the
    # initial gap because merged pairs sit at round-off level afterwards
    max_step_growth: float
    replicas: int
    steps: int

    @property
    def passed(self) -> bool:
        return self.max_step_growth <= CONTRACTION_RTOL and self.max_ratio <= 1.0 + CONTRACTION_RTOL


def _contraction_batch(task):
    cfg, lo, hi = task
    dom = parse_domain(cfg.domain)
    rngs = [np.random.default_rng([cfg.seed + i, 2]) for i in range(lo, hi)]
    starts = np.array([sample_interior(dom, 2, g) for g in rngs])
    d0 = np.linalg.norm(starts[:, 0] - starts[:, 1], axis=1)
    prev = d0.copy()
    worst = np.ones(hi - lo)
    worst_step = np.full(hi - lo, -np.inf)

    def observe(ids, X_prev, db, X, dl, c):
        d = np.linalg.norm(X[:, 0] - X[:, 1], axis=1)
        # zero displacement: ratio 1 and growth 0 by convention
        with np.errstate(divide="ignore", invalid="ignore"):
            tot = np.where(d0[ids] > 0, d / d0[ids], 1.0)
            grow = np.where(d0[ids] > 0, (d - prev[ids]) / d0[ids], 0.0)
        worst[ids] = np.maximum(worst[ids], tot)
        worst_step[ids] = np.maximum(worst_step[ids], grow)
        prev[ids] = d

    run_flows(dom, starts, _noises(cfg, dom, lo, hi), n_steps=cfg.steps, observer=observe)
    return float(worst.max()), float(worst_step.max())


def run_contraction_check(cfg: ExperimentConfig) -> ContractionResult:
    """Synchronous pairs from independent uniform starts; distance must never grow."""
    dom = parse_domain(cfg.domain)
    if not dom.bounded:
        raise ConfigError("contraction check needs a bounded convex domain")
    tasks = [(cfg, lo, hi) for lo, hi in _batches(cfg.replicas, max(cfg.batch, 100))]
    parts = _map(_contraction_batch, tasks, cfg.workers)
    result = ContractionResult(
        max_ratio=max(p[0] for p in parts),
        max_step_growth=max(p[1] for p in parts),
        replicas=cfg.replicas,
        steps=cfg.steps,
    )
    if cfg.out is not None:
        io.write_json(
            cfg.out / "contraction_summary.json",
            {
                "config": cfg.as_dict(),
                "max_ratio": result.max_ratio,
                "max_step_growth": result.max_step_growth,
                "passed": result.passed,
            },
        )
    return result


# -- 2D identity ----------------------------------------------------------------


@dataclass
class Identity2DResult:
    max_gap: float
    endpoint_ratio: SummaryStats  # endpoint-form / consecutive-form, diagnostic
    evaluations: int
    failures: int
    tolerance: float = 1e-8

    @property
    def passed(self) -> bool:
        return self.max_gap <= self.tolerance


def _identity_batch(task):
    cfg, lo, hi = task
    dom = parse_domain(cfg.domain)
    z0 = _start(cfg, dom)
    dirs = direction_set(dom, z0, cfg.directions)
    block = np.broadcast_to(z0, (hi - lo, 1, dom.dim)).copy()
    res = run_flows(dom, block, _noises(cfg, dom, lo, hi), r=cfg.r, budget=cfg.budget, record_base=True)
    gaps, ratios, failures = [], [], 0
    for base in res.base_paths:
        if base is None:
            failures += 1
            continue
        ladder = build_ladder(base, None, cfg.c0 * cfg.eps[0], cfg.r)
        A = multiplicative_functional(dom, ladder)
        for v in dirs:
            lhs = float(np.linalg.norm(A @ v))
            rhs = curvature_product_2d(dom, ladder, v)
            gaps.append(abs(lhs - rhs) / max(lhs, REL_GAP_FLOOR))
            if rhs > 0:
                ratios.append(endpoint_product_2d(dom, ladder, v) / rhs)
    return gaps, ratios, failures


def run_identity_2d(cfg: ExperimentConfig) -> Identity2DResult:
    """Matrix product against the planar curvature-product formula."""
    dom = parse_domain(cfg.domain)
    if dom.dim != 2:
        raise ConfigError("identity-2d needs a planar domain")
    tasks = [(cfg, lo, hi) for lo, hi in _batches(cfg.replicas, max(cfg.batch, 50))]
    gaps, ratios, failures = [], [], 0
    for g, q, f in _map(_identity_batch, tasks, cfg.workers):
        gaps += g
        ratios += q
        failures += f
    result = Identity2DResult(
        max_gap=float(max(gaps)) if gaps else float("nan"),
        endpoint_ratio=SummaryStats.of(ratios),
        evaluations=len(gaps),
        failures=failures,
    )
    if cfg.out is not None:
        io.write_json(
            cfg.out / "identity_2d_summary.json",
            {
                "config": cfg.as_dict(),
                "max_gap": result.max_gap,
                "endpoint_ratio": result.endpoint_ratio.as_dict(),
                "passed": result.passed,
            },
        )
    return result


def summary_line(name: str, passed: bool, detail: str) -> str:
    return f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"


__all__ = [
    "FLOW_COLUMNS",
    "FlowDerivativeResult",
    "run_flow_derivative",
    "summarize_flow_csv",
    "RankResult",
    "run_rank_profile",
    "CalibrationRow",
    "CalibrationResult",
    "run_localtime_calibration",
    "ExcursionStatsResult",
    "run_excursion_stats",
    "ContractionResult",
    "run_contraction_check",
    "Identity2DResult",
    "run_identity_2d",
    "summary_line",
]
