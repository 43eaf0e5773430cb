"""Command line entry point ``rbmflow``.

Exit status: 0 when the experiment's criterion passes, 2 when it fails,
1 on usage or runtime errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as E
from . import io
from .config import ConfigError, ExperimentConfig, load_config
from .excursion import NoBoundaryHitError, decompose
from .geometry import DomainSpecError, parse_domain
from .rbm_sim import DrivingNoise, simulate_path

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2

log = logging.getLogger("rbmflow")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file; flags override its values")
    p.add_argument("--domain", help="e.g. ball:r=1.0, ellipse:a=2,b=1, ellipsoid:a=2,b=1,c=1, halfspace")
    p.add_argument("--dt", type=float)
    p.add_argument("--r", type=float, help="target boundary local time")
    p.add_argument("--eps", type=_floats, help="descending perturbation sizes, comma separated")
    p.add_argument("--c0", type=float, help="excursion threshold factor, eps* = c0 * eps")
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int, help="base seed; replica i uses seed + i")
    p.add_argument("--out", type=Path, help="output directory for CSV and JSON")
    p.add_argument("--budget", type=int, help="max steps per replica")
    p.add_argument("--start", type=_floats, help="starting point, comma separated")
    p.add_argument("--workers", type=int)
    p.add_argument("--batch", type=int, help="replicas simulated together")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbmflow", description="Reflected Brownian flow experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flow-derivative", help="finite differences against the multiplicative functional")
    _shared(p)
    p.add_argument("--directions", type=int, help="number of evenly spread directions")

    p = sub.add_parser("calibrate-localtime", help="mean local time against the boundary measure target")
    _shared(p)
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--dts", type=_floats, help="step sizes sharing one Brownian path")

    p = sub.add_parser("excursion-stats", help="log-log slope of large-excursion counts")
    _shared(p)
    p.add_argument("--thresholds", type=_floats)

    p = sub.add_parser("contraction", help="distance between synchronous pairs never grows")
    _shared(p)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("identity-2d", help="matrix product against the planar curvature product")
    _shared(p)
    p.add_argument("--directions", type=int)

    p = sub.add_parser("simulate", help="dump one path and its excursions")
    _shared(p)
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--gzip", action="store_true", default=None)
    return parser


_NON_CONFIG = {"command", "config", "verbose"}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    return load_config(args.config, overrides)


def _simulate(cfg: ExperimentConfig) -> int:
    dom = parse_domain(cfg.domain)
    start = np.asarray(cfg.start, dtype=float) if cfg.start is not None else dom.default_start()
    noise = DrivingNoise(cfg.seed, cfg.dt, dom.dim)
    path = simulate_path(dom, start, noise, t_max=cfg.t_max)
    out = cfg.out if cfg.out is not None else Path(".")
    suffix = ".csv.gz" if cfg.gzip else ".csv"
    try:
        records = decompose(path)
    except NoBoundaryHitError:
        records = []
    io.write_path_csv(out / f"path{suffix}", path, compress=cfg.gzip)
    io.write_excursions_csv(out / f"excursions{suffix}", records, dom.dim, compress=cfg.gzip)
    print(f"{path.n_steps} steps, L = {path.local_time[-1]:.6g}, {len(records)} excursions -> {out}")
    return EXIT_PASS


def _report(cmd: str, cfg: ExperimentConfig) -> bool:
    if cmd == "flow-derivative":
        res = E.run_flow_derivative(cfg)
        for e, s in res.summary.items():
            print(f"eps={e:g}  median sup_err={s.median:.4g}  mean={s.mean:.4g} +- {s.stderr:.2g}  n={s.count}")
        for k, s in res.cauchy.items():
            print(f"|A(eps)-A(eps')| {k}: median {s.median:.4g}")
        print(f"failed replicas: {res.failures}/{res.replicas}")
        ok = res.passed
        print(E.summary_line("flow-derivative", ok, f"decreasing={res.decreasing} halved={res.halved}"))
    elif cmd == "calibrate-localtime":
        res = E.run_localtime_calibration(cfg)
        for row in res.rows:
            print(
                f"dt={row.dt:g}  mean L={row.mean_raw:.5f} +- {row.se_raw:.2g}  "
                f"adjusted={row.mean_cv:.5f} +- {row.se_cv:.2g}  target={row.target:.5f}  rel_err={row.rel_err:.3g}"
            )
        ok = res.passed
        print(E.summary_line("calibrate-localtime", ok, f"within 5%={res.within_tolerance} shrinks={res.error_shrinks}"))
    elif cmd == "excursion-stats":
        res = E.run_excursion_stats(cfg)
        for b, m, s in zip(res.thresholds, res.mean, res.stderr):
            print(f"b={b:g}  count per unit L={m:.4g} +- {s:.2g}")
        print(f"split slopes: {res.split_slopes[0]:.3f}, {res.split_slopes[1]:.3f}  consistent={res.split_consistent}")
        ok = res.passed
        print(E.summary_line("excursion-stats", ok, f"slope={res.slope:.3f} +- {res.slope_se:.3f}"))
    elif cmd == "contraction":
        res = E.run_contraction_check(cfg)
        ok = res.passed
        print(E.summary_line("contraction", ok, f"max ratio={res.max_ratio!r} max step growth={res.max_step_growth!r}"))
    elif cmd == "identity-2d":
        res = E.run_identity_2d(cfg)
        print(f"endpoint-form ratio: median {res.endpoint_ratio.median:.6g}")
        ok = res.passed
        print(E.summary_line("identity-2d", ok, f"max gap={res.max_gap:.3g} over {res.evaluations} evaluations"))
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(cmd)
    return ok


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        parse_domain(cfg.domain)
        if args.command == "simulate":
            return _simulate(cfg)
        return EXIT_PASS if _report(args.command, cfg) else EXIT_FAIL
    except (ConfigError, DomainSpecError, ValueError, OSError, RuntimeError) as exc:
        print(f"rbmflow: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
