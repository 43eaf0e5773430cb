import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbmflow.derivative import (
    DimensionError,
    curvature_product_2d,
    direction_set,
    endpoint_product_2d,
    finite_difference_derivative,
    flow_derivative_report,
    multiplicative_functional,
    rank_profile,
    tangent_rate_2d,
    transport_factor,
)
from rbmflow.excursion import ExcursionLadder, ExcursionRecord, build_ladder, decompose
from rbmflow.geometry import Ball, Ellipsoid, Halfspace, sample_boundary
from rbmflow.rbm_sim import DrivingNoise, simulate_flow, simulate_path

DISK = Ball(1.0, 2)
ELLIPSE = Ellipsoid(2, (2.0, 1.0))


def ladder_from(points, dells):
    """Hand-built ladder with anchors ``points`` and local-time gaps ``dells``."""
    points = np.asarray(points, dtype=float)
    ells = np.concatenate([[0.0], np.cumsum(dells)])
    recs = tuple(
        ExcursionRecord(start_idx=2 * k, end_idx=2 * k + 1, ell=float(ells[k]), e0=points[k - 1], xk=points[k], size=1.0)
        for k in range(1, len(points))
    )
    return ExcursionLadder(points[0], recs, float(ells[-1]), 0.0, 0)


def disk_oracle(points, dells):
    """Unit disk: each factor is exp(-dl) (I - x x^T) for boundary point x."""
    A = np.eye(2)
    for x, dl in zip(points, dells):
        x = np.asarray(x, float)
        A = np.exp(-dl) * (np.eye(2) - np.outer(x, x)) @ A
    return A


def random_ladder(dom, rng, m):
    pts = sample_boundary(dom, m + 1, rng)
    dells = rng.uniform(0, 0.5, m + 1)
    return ladder_from(pts, dells)


class TestMultiplicativeFunctional:
    def test_two_point_disk_example(self):
        pts, dl = [(1.0, 0.0), (0.0, 1.0)], [0.2, 0.3]
        A = multiplicative_functional(DISK, ladder_from(pts, dl))
        np.testing.assert_allclose(A, disk_oracle(pts, dl), atol=1e-14)
        assert np.linalg.norm(A @ [0.0, 1.0]) == pytest.approx(0.0, abs=1e-15)

    def test_empty_ladder(self):
        A = multiplicative_functional(DISK, ladder_from([(1.0, 0.0)], [0.5]))
        np.testing.assert_allclose(A, [[0, 0], [0, np.exp(-0.5)]], atol=1e-15)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_halfspace_is_projector(self, dim):
        dom = Halfspace(dim)
        lad = random_ladder(dom, np.random.default_rng(0), 5)
        P = np.eye(dim)
        P[-1, -1] = 0.0
        np.testing.assert_allclose(multiplicative_functional(dom, lad), P, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(0, 12))
    def test_disk_matches_dense_oracle(self, seed, m):
        rng = np.random.default_rng(seed)
        lad = random_ladder(DISK, rng, m)
        np.testing.assert_allclose(
            multiplicative_functional(DISK, lad), disk_oracle(lad.points, lad.dells), atol=1e-13
        )

    @pytest.mark.parametrize("dom", [DISK, ELLIPSE, Ball(1.0, 3), Ellipsoid(3, (2.0, 1.0, 0.7))])
    def test_rank_and_norm(self, dom):
        rng = np.random.default_rng(1)
        for _ in range(50):
            lad = random_ladder(dom, rng, int(rng.integers(0, 8)))
            sv = rank_profile(multiplicative_functional(dom, lad))
            assert sv[-1] <= 1e-10 * sv[0]
            assert sv[0] <= np.exp(lad.r * dom.kappa_max) * (1 + 1e-12)
            # convex boundary: transport never expands
            assert sv[0] <= 1 + 1e-12

    def test_disk_rank_exactly_one_below_full(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            lad = random_ladder(DISK, rng, 6)
            normals = -lad.points
            overlaps = np.abs(np.sum(normals[:-1] * normals[1:], axis=1))
            sv = rank_profile(multiplicative_functional(DISK, lad))
            # the nonzero singular value is exp(-r) times the normal overlaps
            assert sv[0] == pytest.approx(np.exp(-lad.r) * np.prod(overlaps), rel=1e-10)
            assert sv[-1] <= 1e-10 * sv[0]

    def test_composition(self):
        path = simulate_path(DISK, (0.2, 0.0), DrivingNoise(17, 1e-4, 2), r=1.0)
        recs = decompose(path)
        full = build_ladder(path, recs, 0.05, 1.0)
        assert full.m >= 2
        k = full.m // 2
        split = full.records[k].ell
        head = build_ladder(path, recs, 0.05, split)
        assert head.m == k
        tail = np.eye(2)
        for x, dl in zip(full.points[k + 1 :], full.dells[k + 1 :]):
            tail = transport_factor(DISK, x, dl) @ tail
        np.testing.assert_allclose(
            tail @ multiplicative_functional(DISK, head), multiplicative_functional(DISK, full), atol=1e-12
        )


class TestRankProfile:
    def test_halfspace(self):
        np.testing.assert_allclose(rank_profile(np.diag([1.0, 1.0, 0.0])), [1.0, 1.0, 0.0])

    def test_sorted(self):
        sv = rank_profile(np.random.default_rng(0).standard_normal((3, 3)))
        assert np.all(np.diff(sv) <= 0)


class TestCurvatureProduct:
    def test_parallel_to_normal(self):
        lad = ladder_from([(1.0, 0.0)], [0.5])
        assert curvature_product_2d(DISK, lad, [1.0, 0.0]) == 0.0

    def test_single_anchor(self):
        lad = ladder_from([(1.0, 0.0)], [0.5])
        assert curvature_product_2d(DISK, lad, [0.0, 1.0]) == pytest.approx(np.exp(-0.5), rel=1e-14)

    def test_orthogonal_normals(self):
        lad = ladder_from([(1.0, 0.0), (0.0, 1.0)], [0.2, 0.3])
        assert curvature_product_2d(DISK, lad, [0.0, 1.0]) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("dom", [DISK, ELLIPSE, Ball(2.0, 2)])
    def test_identity(self, dom):
        rng = np.random.default_rng(3)
        for _ in range(200):
            lad = random_ladder(dom, rng, int(rng.integers(0, 10)))
            v = rng.standard_normal(2)
            lhs = np.linalg.norm(multiplicative_functional(dom, lad) @ v)
            rhs = curvature_product_2d(dom, lad, v)
            assert abs(lhs - rhs) <= 1e-10 * max(lhs, 1e-14)

    def test_tangent_rate(self):
        assert tangent_rate_2d(DISK, [0.0, 1.0]) == pytest.approx(-1.0)
        assert tangent_rate_2d(ELLIPSE, [2.0, 0.0]) == pytest.approx(-2.0)
        assert tangent_rate_2d(ELLIPSE, [0.0, 1.0]) == pytest.approx(-0.25)

    def test_planar_only(self):
        lad = ladder_from([(0.0, 0.0, 1.0)], [0.1])
        with pytest.raises(DimensionError):
            curvature_product_2d(Ball(1.0, 3), lad, [1.0, 0.0, 0.0])

    def test_endpoint_form_close_for_fine_ladders(self):
        path = simulate_path(DISK, (0.2, 0.0), DrivingNoise(5, 1e-4, 2), r=0.5)
        lad = build_ladder(path, None, 0.05, 0.5)
        v = np.array([0.0, 1.0])
        exact = curvature_product_2d(DISK, lad, v)
        approx = endpoint_product_2d(DISK, lad, v)
        assert exact > 0
        assert approx == pytest.approx(exact, rel=0.2)


class TestFiniteDifference:
    def test_zero_direction(self):
        q = finite_difference_derivative(DISK, (0.2, 0.0), (0.0, 0.0), 0.01, DrivingNoise(0, 1e-4, 2), 0.3)
        np.testing.assert_array_equal(q, [0.0, 0.0])

    def test_halfspace_projects(self):
        dom = Halfspace(2)
        v = np.array([0.6, 0.8])
        noise = DrivingNoise(1, 1e-3, 2)
        q = finite_difference_derivative(dom, (0.0, 0.2), v, 0.01, noise, r=0.5)
        # both normal coordinates were absorbed at zero before sigma_r
        a, b = simulate_flow(dom, [(0.0, 0.2), (0.006, 0.208)], noise, r=0.5)
        assert a.contact.any() and b.contact.any()
        np.testing.assert_allclose(q, [0.6, 0.0], atol=1e-9)

    def test_sign_of_transport(self):
        """Finite differences follow exp(-l S): the +S alternative is far off."""
        z0 = np.array([0.2, 0.0])
        dirs = direction_set(DISK, z0)
        errs_minus, errs_plus = [], []
        for seed in range(5):
            noise = DrivingNoise(seed, 1e-4, 2)
            paths = simulate_flow(DISK, np.vstack([z0, z0 + 0.01 * dirs]), noise, r=0.5)
            lad = build_ladder(paths[0], None, 0.01, 0.5)
            ends = np.array([p.positions[-1] for p in paths])
            rep = flow_derivative_report(DISK, lad, ends[0], ends[1:], dirs, 0.01, paths[0].sigma_time)
            errs_minus.append(rep.sup_err)
            A_plus = disk_oracle(lad.points, -lad.dells)
            fd = (ends[1:] - ends[0]) / 0.01
            errs_plus.append(np.linalg.norm(fd - dirs @ A_plus.T, axis=1).max())
        assert np.median(errs_minus) < 0.25 * np.median(errs_plus)


class TestDirections:
    @pytest.mark.parametrize("dom,count", [(DISK, 18), (Ball(1.0, 3), 66), (ELLIPSE, 18)])
    def test_default_counts_and_units(self, dom, count):
        z0 = dom.default_start()
        K = direction_set(dom, z0)
        assert K.shape == (count, dom.dim)
        np.testing.assert_allclose(np.linalg.norm(K, axis=1), 1.0, atol=1e-14)
        n = K[-2]
        assert abs(K[-1] @ n) <= 1e-14

    def test_normal_at_projection(self):
        K = direction_set(DISK, (0.2, 0.0))
        np.testing.assert_allclose(K[-2], [-1.0, 0.0])
