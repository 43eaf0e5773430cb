"""Multiplicative functional of an excursion ladder and flow derivatives.

Between two kept excursions the derivative of the flow is transported along
the boundary point ``x_k`` for ``dl_k`` units of local time by
``exp(-dl_k S(x_k)) pi_{x_k}``, where ``S`` is the shape operator of
:mod:`rbmflow.geometry` (nonnegative on convex boundaries). Boundary pushing
contracts tangent vectors at rate equal to the curvature: on the unit disk a
pair of boundary points pushed outward by ``dl`` has its angular gap divided
by ``1 + dl``. The negative sign encodes that contraction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .excursion import ExcursionLadder
from .geometry import (
    Domain,
    boundary_project,
    exp_shape,
    inward_normal,
    shape_operator,
    tangent_projector,
)
from .rbm_sim import DEFAULT_BUDGET, DrivingNoise, simulate_flow

__all__ = [
    "DimensionError",
    "transport_factor",
    "multiplicative_functional",
    "tangent_rate_2d",
    "curvature_product_2d",
    "endpoint_product_2d",
    "finite_difference_derivative",
    "rank_profile",
    "direction_set",
    "FlowDerivativeReport",
    "flow_derivative_report",
]


class DimensionError(ValueError):
    """Operation defined only in a specific dimension."""


def transport_factor(dom: Domain, x, dl: float) -> np.ndarray:
    """``exp(-dl S(x)) pi_x`` at boundary point ``x``."""
    n = inward_normal(dom, x)
    S = shape_operator(dom, x)
    return exp_shape(dl, -S, n) @ tangent_projector(n)


def multiplicative_functional(dom: Domain, ladder: ExcursionLadder) -> np.ndarray:
    """Ordered product over the ladder, first factor rightmost."""
    A = np.eye(dom.dim)
    for x, dl in zip(ladder.points, ladder.dells):
        A = transport_factor(dom, x, float(dl)) @ A
    return A


def tangent_rate_2d(dom: Domain, x) -> float:
    """Tangent eigenvalue of the transport generator ``-S(x)`` (minus the curvature)."""
    if dom.dim != 2:
        raise DimensionError("planar domains only")
    n = inward_normal(dom, x)
    t = np.array([-n[1], n[0]])
    return float(-t @ shape_operator(dom, x) @ t)


def _hat(v):
    return np.array([-v[1], v[0]])


def curvature_product_2d(dom: Domain, ladder: ExcursionLadder, v0) -> float:
    """``|A v0|`` written as a curvature exponential times normal overlaps.

    ``exp(sum dl_k mu(x_k)) |<n(x_0), hat v0>| prod_k |<n(x_{k-1}), n(x_k)>|``
    with ``mu = tangent_rate_2d``. Exact for the ladder, not a limit.
    """
    if dom.dim != 2:
        raise DimensionError("the curvature product is planar only")
    v0 = np.asarray(v0, dtype=float)
    pts = ladder.points
    normals = inward_normal(dom, pts)
    rates = np.array([tangent_rate_2d(dom, x) for x in pts])
    overlap = abs(normals[0] @ _hat(v0))
    if len(pts) > 1:
        overlap *= np.prod(np.abs(np.sum(normals[:-1] * normals[1:], axis=1)))
    return float(np.exp(np.sum(ladder.dells * rates)) * overlap)


def endpoint_product_2d(dom: Domain, ladder: ExcursionLadder, v0) -> float:
    """Variant using each kept excursion's own endpoints ``<n(e(0)), n(e(zeta-))>``.

    Agrees with :func:`curvature_product_2d` only as the threshold goes to 0;
    reported as a diagnostic.
    """
    if dom.dim != 2:
        raise DimensionError("the curvature product is planar only")
    v0 = np.asarray(v0, dtype=float)
    pts = ladder.points
    rates = np.array([tangent_rate_2d(dom, x) for x in pts])
    val = abs(inward_normal(dom, pts[0]) @ _hat(v0))
    for rec in ladder.records:
        # the left endpoint is a contact position, so on the boundary
        val *= abs(inward_normal(dom, rec.e0) @ inward_normal(dom, rec.xk))
    return float(np.exp(np.sum(ladder.dells * rates)) * val)


def finite_difference_derivative(
    dom: Domain,
    z0,
    v,
    eps: float,
    noise: DrivingNoise,
    r: float,
    budget: int = DEFAULT_BUDGET,
) -> np.ndarray:
    """``(X^{z0 + eps v} - X^{z0}) / eps`` read at the inverse local time of ``z0``."""
    z0 = np.asarray(z0, dtype=float)
    v = np.asarray(v, dtype=float)
    base, moved = simulate_flow(dom, [z0, z0 + eps * v], noise, r=r, budget=budget)
    k = base.sigma_index
    return (moved.positions[k] - base.positions[k]) / eps


def rank_profile(A) -> np.ndarray:
    """Singular values of ``A`` in descending order."""
    return np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)


def _fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    rho = np.sqrt(1.0 - z * z)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])


def direction_set(dom: Domain, z0, count: int | None = None) -> np.ndarray:
    """Evenly spread unit vectors plus the normal and a tangent at ``Pi(z0)``.

    ``count`` defaults to 16 in the plane and 64 in space.
    """
    d = dom.dim
    if count is None:
        count = 16 if d == 2 else 64
    if d == 2:
        ang = 2.0 * np.pi * np.arange(count) / count
        base = np.column_stack([np.cos(ang), np.sin(ang)])
    elif d == 3:
        base = _fibonacci_sphere(count)
    else:
        rng = np.random.default_rng(0)
        base = rng.standard_normal((count, d))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
    p = boundary_project(dom, np.asarray(z0, dtype=float))
    n = inward_normal(dom, p)
    # any unit vector orthogonal to n
    e = np.eye(d)[np.argmin(np.abs(n))]
    t = e - (e @ n) * n
    t /= np.linalg.norm(t)
    return np.vstack([base, n, t])


@dataclass
class FlowDerivativeReport:
    eps: float
    eps_star: float
    directions: np.ndarray
    fd: np.ndarray
    mf: np.ndarray
    sup_err: float
    sigma_r_time: float
    A: np.ndarray

    @property
    def singular_values(self) -> np.ndarray:
        return rank_profile(self.A)


def flow_derivative_report(
    dom: Domain,
    ladder: ExcursionLadder,
    base_end,
    moved_ends,
    directions,
    eps: float,
    sigma_r_time: float,
) -> FlowDerivativeReport:
    """Compare finite-difference quotients with ``A v`` over ``directions``."""
    A = multiplicative_functional(dom, ladder)
    directions = np.asarray(directions, dtype=float)
    fd = (np.asarray(moved_ends) - np.asarray(base_end)) / eps
    mf = directions @ A.T
    err = np.linalg.norm(fd - mf, axis=1)
    return FlowDerivativeReport(
        eps=eps,
        eps_star=ladder.eps_star,
        directions=directions,
        fd=fd,
        mf=mf,
        sup_err=float(err.max()),
        sigma_r_time=sigma_r_time,
        A=A,
    )
