import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbmflow.geometry import Ball, Ellipsoid, Halfspace
from rbmflow.rbm_sim import (
    BudgetError,
    DrivingNoise,
    InsufficientPathError,
    ReflectedPath,
    StepSizeError,
    inverse_local_time,
    reflect,
    run_flows,
    simulate_flow,
    simulate_path,
    step_reflect,
)


class ScriptedNoise(DrivingNoise):
    """Replays a fixed increment sequence, then zeros."""

    def __init__(self, incs, dt=1.0):
        incs = np.atleast_2d(np.asarray(incs, dtype=float))
        super().__init__(seed=0, dt=dt, dim=incs.shape[1])
        object.__setattr__(self, "_incs", incs)

    def blocks(self):
        from rbmflow.rbm_sim import BLOCK

        data = self._incs
        while True:
            out = np.zeros((BLOCK, self.dim))
            take = data[:BLOCK]
            out[: len(take)] = take
            data = data[BLOCK:]
            yield out


def running_max_reflection(x0, incs):
    """y_k = (x0 + B_k) + max(0, max_{j<=k} -(x0 + B_j))."""
    free = x0 + np.concatenate([[0.0], np.cumsum(incs)])
    push = np.maximum.accumulate(np.maximum(-free, 0.0))
    return free + push, push


class TestStepReflect:
    @pytest.mark.parametrize(
        "dom,x,db,y,dl",
        [
            (Halfspace(2), (0, 0.5), (0.1, 0.1), (0.1, 0.6), 0.0),
            (Halfspace(2), (0, 0.5), (0, -0.8), (0, 0.0), 0.3),
            (Ball(1.0, 2), (0.9, 0), (0.3, 0), (1.0, 0), 0.2),
        ],
    )
    def test_examples(self, dom, x, db, y, dl):
        got_y, got_dl = step_reflect(dom, x, db)
        np.testing.assert_allclose(got_y, y, atol=1e-15)
        assert got_dl == pytest.approx(dl, abs=1e-15)

    def test_too_far_outside(self):
        dom = Ellipsoid(2, (2.0, 1.0))
        with pytest.raises(StepSizeError, match="dt"):
            step_reflect(dom, (0.0, 0.9), (0.0, 1.0))

    def test_contact_iff_pushed(self):
        dom = Ball(1.0, 3)
        rng = np.random.default_rng(0)
        y = rng.uniform(-1.1, 1.1, size=(5000, 3))
        pos, dl, c = reflect(dom, y)
        assert np.array_equal(c, dl > 0)
        np.testing.assert_allclose(dl, np.linalg.norm(y - pos, axis=1), atol=1e-15)
        assert np.all(dom.phi(pos) <= dom.tol_bdry)


class TestSimulatePath:
    def test_zero_increments(self):
        dom = Ball(1.0, 2)
        path = simulate_path(dom, (0.3, 0.1), ScriptedNoise(np.zeros((1, 2))), t_max=50)
        assert np.all(path.positions == [0.3, 0.1])
        assert np.all(path.local_time == 0)
        assert not path.contact.any()

    def test_halfline_example(self):
        dom = Halfspace(1)
        path = simulate_path(dom, (0.0,), ScriptedNoise([[1.0], [-2.0], [0.5]]), t_max=3)
        np.testing.assert_array_equal(path.positions[1:, 0], [1.0, 0.0, 0.5])
        np.testing.assert_array_equal(path.local_time[1:], [0.0, 1.0, 1.0])
        np.testing.assert_array_equal(path.contact[1:], [False, True, False])

    def test_pure_push(self):
        dom = Halfspace(1)
        path = simulate_path(dom, (0.0,), ScriptedNoise(-0.25 * np.ones((8, 1))), t_max=8)
        np.testing.assert_array_equal(path.local_time, 0.25 * np.arange(9))
        assert np.all(path.positions == 0.0)

    @settings(max_examples=200, deadline=None)
    @given(
        x0=st.integers(0, 64),
        k=st.lists(st.integers(-256, 256), min_size=1, max_size=300),
    )
    def test_running_max_exact(self, x0, k):
        # dyadic values keep every partial sum exact in floating point
        incs = np.array(k, dtype=float) / 64.0
        start = x0 / 64.0
        path = simulate_path(Halfspace(1), (start,), ScriptedNoise(incs[:, None]), t_max=len(incs))
        y, L = running_max_reflection(start, incs)
        assert np.array_equal(path.positions[:, 0], y)
        assert np.array_equal(path.local_time, L)

    def test_containment_and_flatness(self):
        dom = Ellipsoid(3, (2.0, 1.0, 0.7))
        path = simulate_path(dom, dom.default_start(), DrivingNoise(4, 1e-4, 3), t_max=1.0)
        assert np.all(dom.phi(path.positions) <= dom.tol_bdry)
        dL = np.diff(path.local_time)
        assert np.all(dL >= 0)
        assert np.array_equal(dL > 0, path.contact[1:])
        assert path.local_time[0] == 0 and not path.contact[0]

    def test_stops_at_local_time(self):
        dom = Ball(1.0, 2)
        path = simulate_path(dom, (0.2, 0.0), DrivingNoise(1, 1e-4, 2), r=0.3)
        assert path.local_time[-1] >= 0.3 > path.local_time[-2]
        assert path.sigma_index == path.n_steps
        assert path.sigma_time == pytest.approx(path.n_steps * 1e-4)

    def test_budget(self):
        with pytest.raises(BudgetError):
            simulate_path(Ball(1.0, 2), (0.0, 0.0), DrivingNoise(1, 1e-4, 2), r=0.3, budget=100)


class TestNoise:
    def test_deterministic(self):
        a = DrivingNoise(42, 1e-3, 3).increments(10_000)
        b = DrivingNoise(42, 1e-3, 3).increments(10_000)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, DrivingNoise(43, 1e-3, 3).increments(10_000))

    def test_covariance(self):
        z = DrivingNoise(0, 1e-2, 2).increments(200_000)
        np.testing.assert_allclose(np.cov(z.T), 1e-2 * np.eye(2), atol=2e-4)

    def test_coarsened_sums_fine_path(self):
        fine = DrivingNoise(5, 1e-4, 2).increments(4 * 5000)
        coarse = DrivingNoise(5, 1e-4, 2).coarsened(4).increments(5000)
        np.testing.assert_allclose(coarse, fine.reshape(5000, 4, 2).sum(axis=1), rtol=1e-12, atol=1e-15)


class TestFlow:
    def test_identical_starts(self):
        a, b = simulate_flow(Ball(1.0, 2), [(0.2, 0.0), (0.2, 0.0)], DrivingNoise(3, 1e-4, 2), t_max=0.5)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.local_time, b.local_time)

    def test_halfspace_tangential_offset(self):
        a, b = simulate_flow(Halfspace(2), [(0.0, 0.1), (0.3, 0.1)], DrivingNoise(3, 1e-3, 2), t_max=2.0)
        assert a.contact.any()
        np.testing.assert_allclose(b.positions - a.positions, [[0.3, 0.0]] * len(a.positions), atol=1e-12)

    @pytest.mark.parametrize("dom", [Ball(1.0, 2), Ball(1.0, 3), Ellipsoid(2, (2.0, 1.0))], ids=["disk", "ball3", "ellipse"])
    def test_stepwise_contraction(self, dom):
        rng = np.random.default_rng(0)
        z = 0.8 * dom.ref_point
        starts = [z, z + 0.3 * np.eye(dom.dim)[-1]]
        a, b = simulate_flow(dom, starts, DrivingNoise(int(rng.integers(1e6)), 1e-4, dom.dim), t_max=1.0)
        d = np.linalg.norm(a.positions - b.positions, axis=1)
        assert a.contact.any()
        assert np.all(d[1:] <= d[:-1] * (1 + 1e-12))

    def test_sigma_from_base_path(self):
        dom = Ball(1.0, 2)
        paths = simulate_flow(dom, [(0.2, 0.0), (0.0, 0.5)], DrivingNoise(9, 1e-4, 2), r=0.4)
        assert paths[0].local_time[-1] >= 0.4
        assert paths[0].sigma_index == paths[1].sigma_index == paths[0].n_steps
        assert len(paths[1].positions) == len(paths[0].positions)

    def test_batched_matches_single(self):
        dom = Ball(1.0, 2)
        z0 = np.array([0.2, 0.0])
        starts = np.stack([z0, z0 + [0.0, 0.05], z0 + [0.05, 0.0]])
        noises = [DrivingNoise(s, 1e-4, 2) for s in (11, 12, 13)]
        res = run_flows(dom, np.broadcast_to(starts, (3, 3, 2)).copy(), noises, r=0.5, record_base=True)
        for i, noise in enumerate(noises):
            paths = simulate_flow(dom, starts, noise, r=0.5)
            assert res.sigma_index[i] == paths[0].sigma_index
            np.testing.assert_array_equal(res.endpoints[i], [p.positions[-1] for p in paths])
            np.testing.assert_array_equal(res.base_paths[i].positions, paths[0].positions)
            np.testing.assert_array_equal(res.base_paths[i].contact, paths[0].contact)

    def test_batched_budget_recorded(self):
        dom = Ball(1.0, 2)
        starts = np.zeros((2, 1, 2))
        res = run_flows(dom, starts, [DrivingNoise(s, 1e-4, 2) for s in (0, 1)], r=5.0, budget=50)
        assert all(e is not None and "budget" in e for e in res.errors)
        assert np.all(res.sigma_index == -1)

    def test_start_outside(self):
        with pytest.raises(ValueError):
            simulate_flow(Ball(1.0, 2), [(1.5, 0.0)], DrivingNoise(0, 1e-4, 2), t_max=0.1)


class TestInverseLocalTime:
    @staticmethod
    def path(L):
        L = np.asarray(L, dtype=float)
        return ReflectedPath(np.zeros(1), 1.0, np.zeros((len(L), 1)), L, np.r_[False, np.diff(L) > 0])

    @pytest.mark.parametrize("r,k", [(0.0, 0), (0.5, 3), (0.3, 1), (0.9, 3)])
    def test_examples(self, r, k):
        assert inverse_local_time(self.path([0, 0.3, 0.3, 0.9]), r) == k

    def test_insufficient(self):
        with pytest.raises(InsufficientPathError):
            inverse_local_time(self.path([0, 0.3, 0.3, 0.9]), 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0, 1))
    def test_linear_scan(self, steps, frac):
        L = np.concatenate([[0.0], np.cumsum(steps)])
        r = frac * L[-1]
        k = inverse_local_time(self.path(L), r)
        assert k == next(i for i, v in enumerate(L) if v >= r)
