"""Differential geometry of implicit C^2 domains.

A domain is ``D = {phi < 0}`` with analytic gradient and Hessian. The unit
inward normal is ``n = -grad(phi)/|grad(phi)|`` and the shape operator is
``S(x) v = -d_v n(x)`` on the tangent space, extended by ``S(x) n(x) = 0``.
With this orientation convex boundaries have nonnegative principal
curvatures (``+1/R`` on a sphere of radius ``R``).

All domain methods accept arrays with arbitrary leading axes; the last axis
is the spatial coordinate.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

__all__ = [
    "BoundaryError",
    "ProjectionError",
    "DomainSpecError",
    "Domain",
    "Ball",
    "Ellipsoid",
    "Halfspace",
    "parse_domain",
    "inward_normal",
    "tangent_projector",
    "tangent_project",
    "shape_operator",
    "boundary_project",
    "exp_shape",
    "sample_boundary",
    "sample_interior",
    "NuDiagnostics",
    "nu_diagnostics",
    "normal_lipschitz_ratio",
    "pipi_ratio",
]

NEWTON_MAX_ITER = 50
NEWTON_RTOL = 1e-12


class BoundaryError(ValueError):
    """A point required to lie on the boundary does not."""


class ProjectionError(RuntimeError):
    """Nearest-point projection failed to converge."""


class DomainSpecError(ValueError):
    """Malformed domain specification string."""


@dataclass(frozen=True)
class Domain:
    """Base class for implicit domains ``{phi < 0}``.

    Subclasses supply ``phi``, ``grad``, ``hessian`` and a vectorised
    nearest-point map ``nearest``.
    """

    dim: int

    kind = "abstract"
    bounded = True

    # -- implicit function ------------------------------------------------
    def phi(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError

    def nearest(self, y):
        """Nearest boundary point for each row of ``y`` (no reach check)."""
        raise NotImplementedError

    # -- metric data ------------------------------------------------------
    @property
    def diameter(self) -> float:
        raise NotImplementedError

    @property
    def reach(self) -> float:
        """Lower bound delta_0 on the tube radius with unique projection."""
        raise NotImplementedError

    @property
    def kappa_max(self) -> float:
        """Largest principal curvature magnitude over the boundary."""
        raise NotImplementedError

    @property
    def ref_point(self) -> np.ndarray:
        """Fallback boundary point z_* for degenerate projections."""
        raise NotImplementedError

    @property
    def tol_bdry(self) -> float:
        d = self.diameter
        return 1e-9 * (d if math.isfinite(d) else 1.0)

    @property
    def center(self) -> np.ndarray:
        return np.zeros(self.dim)

    def volume(self) -> float:
        raise NotImplementedError

    def surface_area(self) -> float:
        raise NotImplementedError

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def default_start(self) -> np.ndarray:
        z = np.zeros(self.dim)
        z[0] = 0.2
        return z

    def contains(self, x, tol: float = 0.0):
        return self.phi(np.asarray(x, dtype=float)) <= tol


@dataclass(frozen=True)
class Ellipsoid(Domain):
    """Axis-aligned ellipsoid ``sum (x_i/a_i)^2 < 1``; ``dim == len(axes)``."""

    axes: tuple[float, ...] = field(default=(1.0, 1.0))

    kind = "ellipsoid"

    def __post_init__(self):
        if len(self.axes) != self.dim:
            raise DomainSpecError("number of semi-axes must equal dimension")
        if self.dim < 2:
            raise DomainSpecError("dimension must be at least 2")
        if any(not (a > 0 and math.isfinite(a)) for a in self.axes):
            raise DomainSpecError("semi-axes must be positive and finite")
        object.__setattr__(self, "_a2", np.asarray(self.axes, dtype=float) ** 2)

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (np.sum(x * x / self._a2, axis=-1) - 1.0)

    def grad(self, x):
        return np.asarray(x, dtype=float) / self._a2

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.diag(1.0 / self._a2), x.shape + (self.dim,)).copy()

    def nearest(self, y):
        y = np.asarray(y, dtype=float)
        shape = y.shape
        y = y.reshape(-1, self.dim)
        a2 = self._a2
        inside = np.sum(y * y / a2, axis=1) < 1.0
        amin2 = a2.min()
        ay2 = a2 * y * y
        shift = a2 - amin2
        # With the Lagrange parameter t the nearest point is a_i^2 y_i/(a_i^2 + t),
        # where t solves g(t) = sum a_i^2 y_i^2/(a_i^2+t)^2 - 1 = 0 on (-amin2, inf).
        # Work in s = t + amin2 > 0 so the smallest denominator carries full
        # relative precision near the pole. g is convex and decreasing in s;
        # each single term bounds the root from below, the sum from above.
        lo = np.max(np.sqrt(ay2) - shift, axis=1)
        lo = np.maximum(lo, np.where(inside, 1e-100 * amin2, amin2))
        hi = np.sqrt(np.sum(ay2, axis=1))
        hi = np.where(inside, np.minimum(hi, amin2), np.maximum(hi, amin2))
        # Newton from the left end never overshoots a convex decreasing g
        t = lo.copy()
        done = np.zeros(len(y), dtype=bool)
        for _ in range(NEWTON_MAX_ITER):
            den = shift + t[:, None]
            g = np.sum(ay2 / den**2, axis=1) - 1.0
            dg = -2.0 * np.sum(ay2 / den**3, axis=1)
            lo = np.where(g > 0, t, lo)
            hi = np.where(g < 0, t, hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                tn = t - g / dg
            bad = ~np.isfinite(tn) | (tn < lo) | (tn > hi)
            tn = np.where(bad, 0.5 * (lo + hi), tn)
            conv = (np.abs(tn - t) <= NEWTON_RTOL * t) | (hi - lo <= NEWTON_RTOL * t)
            t = np.where(done, t, tn)
            done |= conv
            if done.all():
                break
        if not done.all():
            raise ProjectionError(
                f"ellipsoid projection did not converge in {NEWTON_MAX_ITER} iterations"
            )
        x = a2 * y / (shift + t[:, None])
        # on the medial axis of a flattened direction g has no root and t runs
        # to the pole; the nearest point then leaves that axis, so restore the
        # missing coordinate from the constraint
        resid = 1.0 - np.sum(x * x / a2, axis=1)
        degen = resid > 1e-9
        if degen.any():
            k = int(np.argmin(a2))
            x[degen, k] = np.sqrt(a2[k] * resid[degen]) * np.where(y[degen, k] < 0, -1.0, 1.0)
        return x.reshape(shape)

    @property
    def diameter(self):
        return 2.0 * max(self.axes)

    @property
    def reach(self):
        return min(self.axes) ** 2 / max(self.axes)

    @property
    def kappa_max(self):
        return max(self.axes) / min(self.axes) ** 2

    @property
    def ref_point(self):
        z = np.zeros(self.dim)
        z[0] = self.axes[0]
        return z

    def volume(self):
        return (
            math.pi ** (self.dim / 2) / math.gamma(self.dim / 2 + 1) * math.prod(self.axes)
        )

    def surface_area(self):
        if len(set(self.axes)) == 1:
            R = self.axes[0]
            return 2 * math.pi ** (self.dim / 2) / math.gamma(self.dim / 2) * R ** (self.dim - 1)
        if self.dim == 2:
            a, b = max(self.axes), min(self.axes)
            return 4.0 * a * special.ellipe(1.0 - (b / a) ** 2)
        if self.dim == 3:
            a, b, c = self.axes

            def element(phi, theta):
                s, co = math.sin(theta), math.cos(theta)
                return s * math.sqrt(
                    (b * c * s * math.cos(phi)) ** 2
                    + (a * c * s * math.sin(phi)) ** 2
                    + (a * b * co) ** 2
                )

            val, _ = integrate.dblquad(element, 0.0, math.pi, 0.0, 2 * math.pi, epsabs=1e-12)
            return val
        raise NotImplementedError("surface area only for n <= 3 or balls")

    def bounding_box(self):
        a = np.asarray(self.axes, dtype=float)
        return -a, a


@dataclass(frozen=True)
class Ball(Ellipsoid):
    """Ball of radius ``radius`` centred at the origin."""

    radius: float = 1.0

    kind = "ball"

    def __init__(self, radius: float = 1.0, dim: int = 2):
        object.__setattr__(self, "dim", int(dim))
        object.__setattr__(self, "radius", float(radius))
        object.__setattr__(self, "axes", (float(radius),) * int(dim))
        Ellipsoid.__post_init__(self)

    def nearest(self, y):
        y = np.asarray(y, dtype=float)
        rad = np.sqrt(np.sum(y * y, axis=-1, keepdims=True))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.radius * y / rad
        # the centre has no unique nearest point; report z_*
        return np.where(rad > 0, out, self.ref_point)

    @property
    def reach(self):
        return self.radius


@dataclass(frozen=True)
class Halfspace(Domain):
    """Test-only half-space ``{x_n > 0}`` (unbounded)."""

    kind = "halfspace"
    bounded = False

    def phi(self, x):
        return -np.asarray(x, dtype=float)[..., -1]

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        g[..., -1] = -1.0
        return g

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.dim,))

    def nearest(self, y):
        out = np.array(y, dtype=float)
        out[..., -1] = 0.0
        return out

    @property
    def diameter(self):
        return math.inf

    @property
    def reach(self):
        return math.inf

    @property
    def kappa_max(self):
        return 0.0

    @property
    def ref_point(self):
        return np.zeros(self.dim)

    def default_start(self):
        z = np.zeros(self.dim)
        z[-1] = 0.2
        return z


_SPEC_RE = re.compile(r"^([a-z]+)(?::(\w+=[^,=:]+(?:,\w+=[^,=:]+)*))?$")


def parse_domain(spec: str) -> Domain:
    """Build a domain from ``kind(:key=float(,key=float)*)?``.

    Examples: ``ball:r=1.0``, ``ball:r=1,dim=3``, ``ellipse:a=2.0,b=1.0``,
    ``ellipsoid:a=2,b=1.5,c=1``, ``halfspace``, ``halfspace:dim=3``.
    """
    m = _SPEC_RE.match(spec.strip())
    if m is None:
        raise DomainSpecError(f"cannot parse domain spec {spec!r}")
    kind, body = m.group(1), m.group(2)
    params: dict[str, float] = {}
    if body:
        for item in body.split(","):
            key, val = item.split("=")
            try:
                params[key] = float(val)
            except ValueError:
                raise DomainSpecError(f"value for {key!r} is not a float: {val!r}") from None

    def take(allowed, defaults):
        unknown = set(params) - set(allowed)
        if unknown:
            raise DomainSpecError(f"unknown keys for {kind}: {sorted(unknown)}")
        return {k: params.get(k, defaults.get(k)) for k in allowed}

    def as_dim(val):
        if val is None or val != int(val) or val < 2:
            raise DomainSpecError(f"dim must be an integer >= 2, got {val}")
        return int(val)

    if kind == "ball":
        p = take(("r", "dim"), {"r": 1.0, "dim": 2})
        return Ball(radius=p["r"], dim=as_dim(p["dim"]))
    if kind == "ellipse":
        p = take(("a", "b"), {})
        if p["a"] is None or p["b"] is None:
            raise DomainSpecError("ellipse needs a and b")
        return Ellipsoid(dim=2, axes=(p["a"], p["b"]))
    if kind == "ellipsoid":
        p = take(("a", "b", "c"), {})
        if None in p.values():
            raise DomainSpecError("ellipsoid needs a, b and c")
        return Ellipsoid(dim=3, axes=(p["a"], p["b"], p["c"]))
    if kind == "halfspace":
        p = take(("dim",), {"dim": 2})
        return Halfspace(dim=as_dim(p["dim"]))
    raise DomainSpecError(f"unknown domain kind {kind!r}")


# -- pointwise operations -----------------------------------------------------


def _check_on_boundary(dom: Domain, x: np.ndarray) -> None:
    # phi is normalised so that |grad phi| is O(1) near the boundary
    val = np.abs(dom.phi(x)) / np.maximum(np.linalg.norm(dom.grad(x), axis=-1), 1e-300)
    if np.any(val > dom.tol_bdry):
        raise BoundaryError(
            f"point is {np.max(val):.3e} from the boundary (tolerance {dom.tol_bdry:.1e})"
        )


def inward_normal(dom: Domain, x, check: bool = True) -> np.ndarray:
    """Unit inward normal ``-grad(phi)/|grad(phi)|`` at boundary point(s) ``x``."""
    x = np.asarray(x, dtype=float)
    if check:
        _check_on_boundary(dom, x)
    g = dom.grad(x)
    return -g / np.linalg.norm(g, axis=-1, keepdims=True)


def tangent_projector(n) -> np.ndarray:
    """Matrix of the orthogonal projection onto the hyperplane normal to ``n``."""
    n = np.asarray(n, dtype=float)
    eye = np.eye(n.shape[-1])
    return eye - n[..., :, None] * n[..., None, :]


def tangent_project(n, z) -> np.ndarray:
    """``z - <z, n> n``."""
    n = np.asarray(n, dtype=float)
    z = np.asarray(z, dtype=float)
    return z - np.sum(z * n, axis=-1, keepdims=True) * n


def shape_operator(dom: Domain, x, check: bool = True) -> np.ndarray:
    """Shape operator at boundary point(s) ``x`` as an ``n x n`` matrix.

    Built as ``P H P / |grad phi|`` with ``P = I - n n^T``, then symmetrised,
    so that ``S n = 0`` up to round-off in the symmetrisation only.
    """
    x = np.asarray(x, dtype=float)
    if check:
        _check_on_boundary(dom, x)
    g = dom.grad(x)
    gn = np.linalg.norm(g, axis=-1)
    n = -g / gn[..., None]
    P = tangent_projector(n)
    S = P @ dom.hessian(x) @ P / gn[..., None, None]
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def boundary_project(dom: Domain, x) -> np.ndarray:
    """Nearest boundary point, or ``dom.ref_point`` when ``d(x, dD) >= reach``."""
    x = np.asarray(x, dtype=float)
    p = dom.nearest(x)
    d = np.linalg.norm(x - p, axis=-1, keepdims=True)
    return np.where(d < dom.reach, p, dom.ref_point)


def _expm_series(A: np.ndarray, terms: int = 18) -> np.ndarray:
    out = np.eye(A.shape[-1])
    term = np.eye(A.shape[-1])
    for k in range(1, terms + 1):
        term = term @ A / k
        out = out + term
    return out


def exp_shape(l: float, S, n=None) -> np.ndarray:
    """Matrix exponential ``exp(l S)`` by scaling and squaring.

    If the normal ``n`` is given the normal direction is split off exactly:
    the result is ``P exp(l S) P + n n^T``, which fixes ``n``.
    """
    if l < 0:
        raise ValueError("local-time amount must be nonnegative")
    A = l * np.asarray(S, dtype=float)
    norm = np.abs(A).sum(axis=0).max() if A.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.25)))) if norm > 0.25 else 0
    E = _expm_series(A / 2.0**s)
    for _ in range(s):
        E = E @ E
    E = 0.5 * (E + E.T)
    if n is not None:
        n = np.asarray(n, dtype=float)
        P = tangent_projector(n)
        E = P @ E @ P + np.outer(n, n)
    return E


# -- sampling and diagnostics -------------------------------------------------


def sample_boundary(dom: Domain, count: int, rng: np.random.Generator, window: float = 1.0):
    """Boundary points; for the half-space, uniform in a ``window`` square."""
    if not dom.bounded:
        x = np.zeros((count, dom.dim))
        x[:, :-1] = rng.uniform(-window, window, size=(count, dom.dim - 1))
        return x
    u = rng.standard_normal((count, dom.dim))
    a2 = np.asarray(dom.axes) ** 2
    return u / np.sqrt(np.sum(u * u / a2, axis=1, keepdims=True))


def sample_interior(dom: Domain, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in a bounded domain by rejection from the bounding box."""
    if not dom.bounded:
        raise ValueError("uniform sampling needs a bounded domain")
    lo, hi = dom.bounding_box()
    out = np.empty((0, dom.dim))
    while len(out) < count:
        cand = rng.uniform(lo, hi, size=(2 * (count - len(out)) + 8, dom.dim))
        out = np.vstack([out, cand[dom.phi(cand) < 0]])
    return out[:count]


@dataclass
class NuDiagnostics:
    """Sampled worst-case ratios for the local boundary inequalities.

    Each entry is the largest value over sampled configurations of the
    ratio whose bound is ``nu``; ``nu`` is their maximum (clipped at 0).
    """

    normal_defect: float  # (1 - <n(x), n(y)>) / |x-y|^2
    chord_normal: float  # |<x-y, n(x)>| / |x-y|^2
    interior_normal: float  # <x-z, n(x)> / |x-z|^2
    cross_normal: float  # <x-z, n(y)> / (|x-y| |x-z|)
    tangent_normal: float  # |pi_y n(x)| / |x-y|
    pairs: int
    min_chord_ratio: float  # smallest |<x-y, n(x)>| / |x-y|^2 seen

    @property
    def nu(self) -> float:
        return max(
            0.0,
            self.normal_defect,
            self.chord_normal,
            self.interior_normal,
            self.cross_normal,
            self.tangent_normal,
        )


def _local_triples(dom, count, rng, radius):
    x = sample_boundary(dom, count, rng)
    # neighbours y, z within `radius` of x
    y = dom.nearest(x + radius * rng.uniform(0.0, 1.0, (count, 1)) * _unit(rng, count, dom.dim))
    n_x = inward_normal(dom, x, check=False)
    depth = rng.uniform(0.0, 1.0, (count, 1)) * radius
    zr = x + radius * rng.uniform(0.0, 1.0, (count, 1)) * _unit(rng, count, dom.dim) + depth * n_x
    z = zr.copy()
    outside = dom.phi(zr) > 0
    z[outside] = dom.nearest(zr[outside])
    keep = (np.linalg.norm(x - y, axis=1) <= radius) & (np.linalg.norm(x - z, axis=1) <= radius)
    return x[keep], y[keep], z[keep]


def _unit(rng, count, dim):
    u = rng.standard_normal((count, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def nu_diagnostics(
    dom: Domain, count: int = 20000, seed: int = 0, radius: float | None = None
) -> NuDiagnostics:
    """Empirical smallest ``nu`` satisfying the local normal/chord inequalities."""
    rng = np.random.default_rng(seed)
    if radius is None:
        radius = min(dom.reach, 1.0)
    x, y, z = _local_triples(dom, count, rng, radius)
    nx = inward_normal(dom, x, check=False)
    ny = inward_normal(dom, y, check=False)
    dxy = np.linalg.norm(x - y, axis=1)
    dxz = np.linalg.norm(x - z, axis=1)
    # below ~1e-2 * radius the quadratic ratios are dominated by round-off
    floor = 1e-2 * radius
    ok = (dxy > floor) & (dxz > floor)
    x, y, z, nx, ny, dxy, dxz = (a[ok] for a in (x, y, z, nx, ny, dxy, dxz))
    chord = np.abs(np.sum((x - y) * nx, axis=1)) / dxy**2
    return NuDiagnostics(
        normal_defect=float(np.max((1.0 - np.sum(nx * ny, axis=1)) / dxy**2)),
        chord_normal=float(np.max(chord)),
        interior_normal=float(np.max(np.sum((x - z) * nx, axis=1) / dxz**2)),
        cross_normal=float(np.max(np.sum((x - z) * ny, axis=1) / (dxy * dxz))),
        tangent_normal=float(
            np.max(np.linalg.norm(tangent_project(ny, nx), axis=1) / dxy)
        ),
        pairs=int(len(x)),
        min_chord_ratio=float(np.min(chord)),
    )


def normal_lipschitz_ratio(dom: Domain, count: int = 20000, seed: int = 0) -> float:
    """Sampled ``max |n(x) - n(y)| / |x - y|`` over boundary pairs."""
    rng = np.random.default_rng(seed)
    x = sample_boundary(dom, count, rng)
    y = sample_boundary(dom, count, rng)
    d = np.linalg.norm(x - y, axis=1)
    ok = d > 1e-10
    dn = np.linalg.norm(inward_normal(dom, x, check=False) - inward_normal(dom, y, check=False), axis=1)
    return float(np.max(dn[ok] / d[ok])) if ok.any() else 0.0


def pipi_ratio(dom: Domain, count: int = 5000, seed: int = 0, radius: float = 0.5) -> float:
    """Sampled ``max ||pi_z (pi_y - pi_x) pi_w|| / (|w-y||y-z| + |w-x||x-z|)``.

    The four boundary points are drawn in a neighbourhood of a common base
    point so that the small-separation regime is represented.
    """
    rng = np.random.default_rng(seed)
    base = sample_boundary(dom, count, rng)
    pts = [
        dom.nearest(base + radius * rng.uniform(0, 1, (count, 1)) * _unit(rng, count, dom.dim))
        for _ in range(4)
    ]
    w, x, y, z = pts
    Pw, Px, Py, Pz = (tangent_projector(inward_normal(dom, p, check=False)) for p in pts)
    M = Pz @ (Py - Px) @ Pw
    lhs = np.linalg.norm(M, ord=2, axis=(1, 2))
    rhs = np.linalg.norm(w - y, axis=1) * np.linalg.norm(y - z, axis=1) + np.linalg.norm(
        w - x, axis=1
    ) * np.linalg.norm(x - z, axis=1)
    ok = rhs > 1e-12
    return float(np.max(lhs[ok] / rhs[ok]))
