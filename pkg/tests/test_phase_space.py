import math

import numpy as np
import pytest

from freestream import Ball, PopulationTriangle, Slab, build_grids, chord_time, regularity_tau0
from freestream.phase_space import GeometryError, UnboundedRayError


def bisect_exit_time(space, x, v, t_hint):
    """Independent oracle: bisection on the exit predicate x - s v in Omega."""
    hi = max(2.0 * t_hint, 1e-6)
    while space.contains(x - hi * v):
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if space.contains(x - mid * v):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestSojournExamples:
    def test_slab_center_unit_speed(self, slab):
        assert slab.sojourn_time([0.0], [1.0]) == pytest.approx(1.0, abs=1e-14)

    def test_slab_outgoing_wall_point(self, slab):
        # outgoing at the right wall with xi = 0.5: full crossing takes 4
        assert slab.sojourn_time([1.0], [0.5]) == pytest.approx(4.0, abs=1e-12)

    def test_incoming_points_have_zero_sojourn(self, slab, ball):
        assert slab.sojourn_time([-1.0], [0.7]) == 0.0
        assert ball.sojourn_time([0.0, -1.0], [0.0, 0.9]) == 0.0

    def test_ball_diameter(self):
        b = Ball(2, 1.0)
        assert b.sojourn_time([1.0, 0.0], [1.0, 0.0]) == pytest.approx(2.0, abs=1e-13)

    def test_zero_velocity_never_exits(self, slab, ball):
        assert math.isinf(slab.sojourn_time([0.2], [0.0]))
        assert math.isinf(ball.sojourn_time([0.2, 0.1], [0.0, 0.0]))

    def test_rejects_points_outside_closure(self, slab, ball):
        with pytest.raises(GeometryError):
            slab.sojourn_time([1.5], [1.0])
        with pytest.raises(GeometryError):
            ball.sojourn_time([1.0, 1.0], [1.0, 0.0])

    def test_triangle_sojourn_is_age(self, triangle):
        assert triangle.sojourn_time([0.35, 0.8], [1.0, 0.0]) == pytest.approx(0.35)


class TestBackwardExit:
    def test_slab_center(self, slab):
        bp = slab.backward_exit([0.0], [1.0])
        assert bp.position[0] == pytest.approx(-1.0, abs=1e-14)
        assert bp.side == "incoming"

    def test_ball_chord(self):
        b = Ball(2, 1.0)
        bp = b.backward_exit([0.5, 0.0], [1.0, 0.0])
        assert np.allclose(bp.position, [-1.0, 0.0], atol=1e-13)
        assert bp.side == "incoming"

    def test_incoming_point_is_fixed(self, slab):
        bp = slab.backward_exit([-1.0], [0.5])
        assert bp.position[0] == pytest.approx(-1.0)

    def test_unbounded_ray_error(self, slab):
        with pytest.raises(UnboundedRayError):
            slab.backward_exit([0.3], [0.0])

    def test_exit_lands_on_boundary(self, rng):
        b = Ball(2, 0.7)
        s = Slab(1.3)
        for _ in range(200):
            x = rng.uniform(-0.49, 0.49, 2)
            v = rng.normal(size=2)
            bp = b.backward_exit(x, v)
            assert abs(np.linalg.norm(bp.position) - 0.7) <= 1e-10
            xs = rng.uniform(-1.29, 1.29)
            vs = rng.uniform(0.05, 1.0) * rng.choice([-1.0, 1.0])
            bps = s.backward_exit([xs], [vs])
            assert abs(abs(bps.position[0]) - 1.3) <= 1e-10


class TestOracleAgreement:
    @pytest.mark.parametrize("make", [
        lambda: Slab(1.0),
        lambda: Slab(0.4, speeds=(-2.0, 2.0)),
        lambda: Ball(2, 1.0),
        lambda: Ball(3, 0.8),
        lambda: PopulationTriangle(0.2, 1.0),
    ])
    def test_analytic_matches_bisection(self, make, rng):
        space = make()
        n = 200
        for _ in range(n):
            if isinstance(space, Slab):
                x = np.array([rng.uniform(-0.99, 0.99) * space.half_width])
                v = np.array([rng.uniform(0.05, 1.0) * rng.choice([-1.0, 1.0])])
            elif isinstance(space, Ball):
                u = rng.normal(size=space.dim)
                x = rng.uniform(0.0, 0.97) ** (1 / space.dim) * space.radius * u / np.linalg.norm(u)
                v = rng.normal(size=space.dim)
                if np.linalg.norm(v) < 0.1:
                    continue
            else:
                ell = rng.uniform(space.l1 + 0.01, space.l2 - 0.01)
                x = np.array([rng.uniform(0.01, 0.99) * ell, ell])
                v = np.array([1.0, 0.0])
            t = space.sojourn_time(x, v)
            t_bis = bisect_exit_time(space, x, v, t)
            assert abs(t - t_bis) <= 1e-10 * (1.0 + t)


class TestFlowAdditivity:
    def test_moving_forward_adds_to_sojourn(self, rng):
        # t(x + s v, v) = s + t(x, v) while x + s v stays inside
        for space in (Slab(1.0), Ball(2, 1.0), PopulationTriangle(0.2, 1.0)):
            for _ in range(300):
                if isinstance(space, Slab):
                    x = np.array([rng.uniform(-0.95, 0.95)])
                    v = np.array([rng.uniform(0.05, 1.0) * rng.choice([-1.0, 1.0])])
                elif isinstance(space, Ball):
                    u = rng.normal(size=2)
                    x = 0.9 * rng.uniform(0, 1) * u / np.linalg.norm(u)
                    v = rng.normal(size=2)
                else:
                    ell = rng.uniform(0.25, 0.95)
                    x = np.array([rng.uniform(0.01, 0.9) * ell, ell])
                    v = np.array([1.0, 0.0])
                if isinstance(space, PopulationTriangle):
                    forward = x[1] - x[0]        # room left until division
                else:
                    forward = space.sojourn_time(x, -v)
                if not math.isfinite(forward) or forward <= 0:
                    continue
                s = 0.9 * rng.uniform(0, 1) * forward
                t0 = space.sojourn_time(x, v)
                t1 = space.sojourn_time(x + s * np.asarray(v), v)
                assert t1 == pytest.approx(s + t0, abs=1e-10 * (1 + t0))


class TestRegularity:
    def test_slab_tau0_is_full_crossing(self, slab):
        _, _, tout = build_grids(slab, nx=40, nv=64, speed_rule="inclusive")
        assert regularity_tau0(slab, tout) == pytest.approx(2.0, abs=1e-12)
        assert np.all(tout.sojourn >= 2.0 - 1e-12)

    def test_ball_floor_tracks_the_cutoff(self, unit_ball):
        taus = []
        for cut in (3e-2, 1e-2, 3e-3):
            _, _, tout = build_grids(unit_ball, nx=6, nv=2, n_dir=512,
                                     n_boundary=64, tangential_cutoff=cut)
            taus.append(regularity_tau0(unit_ball, tout))
        assert taus[0] > taus[1] > taus[2]
        assert taus[-1] < 0.05    # heading to zero: non-regular phase space

    def test_triangle_tau0_converges_to_min_cycle(self, triangle):
        vals = []
        for nl in (20, 40, 80):
            _, _, tout = build_grids(triangle, nx=8, nv=nl)
            vals.append(regularity_tau0(triangle, tout))
        assert vals[0] > vals[1] > vals[2] > triangle.l1
        assert vals[2] == pytest.approx(triangle.l1, abs=(0.8 / 80))

    def test_continuum_values(self, slab, unit_ball, triangle):
        assert slab.continuum_tau0() == 2.0
        assert unit_ball.continuum_tau0() == 0.0
        assert triangle.continuum_tau0() == 0.2


def test_chord_time_symmetry(unit_ball, rng):
    for _ in range(50):
        u = rng.normal(size=2)
        x = 0.8 * rng.uniform(0, 1) * u / np.linalg.norm(u)
        v = rng.normal(size=2)
        assert chord_time(unit_ball, x, v) == pytest.approx(
            chord_time(unit_ball, x, -v), rel=1e-12)
