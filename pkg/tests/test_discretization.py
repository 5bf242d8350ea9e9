import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freestream import (
    Ball,
    DensityField,
    PopulationTriangle,
    Slab,
    TraceField,
    build_grids,
    field_from_function,
    interpolate,
    norm_p,
    write_field_csv,
)
from freestream.discretization import GridError, OutOfHullError


class TestWeightSums:
    def test_slab_phase_measure(self):
        phase, _, _ = build_grids(Slab(1.0), nx=100, nv=100)
        assert phase.weights.sum() == pytest.approx(4.0, abs=1e-12)

    def test_slab_outgoing_flux_measure(self):
        # integral of |xi| over each wall's outgoing half: 1/2 per wall
        _, _, tout = build_grids(Slab(1.0), nx=100, nv=100)
        assert tout.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_triangle_phase_is_area(self):
        phase, _, _ = build_grids(PopulationTriangle(0.2, 1.0), nx=16, nv=24)
        assert phase.weights.sum() == pytest.approx((1.0 - 0.04) / 2, abs=1e-12)

    def test_ball_phase_measure(self):
        b = Ball(2, 1.0, speeds=(0.5, 1.0))
        phase, _, _ = build_grids(b, nx=10, nv=4, n_dir=16, n_boundary=16)
        area = math.pi
        mu = 2 * math.pi * (1.0 - 0.25) / 2
        assert phase.weights.sum() == pytest.approx(area * mu, rel=1e-12)

    def test_all_weights_positive_no_tangential_nodes(self, ball_grids, slab_grids):
        for grids in (ball_grids, slab_grids):
            phase, tin, tout = grids
            assert np.all(phase.weights > 0)
            for tg in (tin, tout):
                assert np.all(tg.weights > 0)
                vn = np.einsum("ij,ij->i", tg.velocities, tg.normals)
                assert np.all(np.abs(vn) > 1e-3 * 0.999)

    def test_trace_weights_are_flux_times_boundary_measure(self, ball_grids):
        _, tin, tout = ball_grids
        for tg in (tin, tout):
            vn = np.abs(np.einsum("ij,ij->i", tg.velocities, tg.normals))
            expect = tg.gamma_weights * vn * tg.vel_weights[tg.vel_index]
            assert np.allclose(tg.weights, expect, rtol=1e-13)


class TestNorms:
    def test_constant_one_norms(self, slab_grids):
        phase, _, tout = slab_grids
        assert norm_p(DensityField(phase, np.ones(len(phase))), 1) \
            == pytest.approx(4.0, abs=1e-12)
        assert norm_p(TraceField(tout, np.ones(len(tout))), 1) \
            == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(c=st.floats(-50, 50, allow_nan=False), seed=st.integers(0, 2**31))
    def test_scaling_homogeneity(self, slab_grids, c, seed):
        phase = slab_grids[0]
        f = np.random.default_rng(seed).standard_normal(len(phase))
        for p in (1.0, 2.0, 3.5):
            assert norm_p(DensityField(phase, c * f), p) == pytest.approx(
                abs(c) * norm_p(DensityField(phase, f), p), rel=1e-12, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_hoelder_sanity(self, slab_grids, seed):
        phase = slab_grids[0]
        f = np.random.default_rng(seed).standard_normal(len(phase))
        fd = DensityField(phase, f)
        one = DensityField(phase, np.ones(len(phase)))
        assert norm_p(fd, 1) <= norm_p(fd, 2) * norm_p(one, 2) * (1 + 1e-12)

    def test_p_below_one_rejected(self, slab_grids):
        with pytest.raises(ValueError):
            norm_p(DensityField(slab_grids[0], np.ones(len(slab_grids[0]))), 0.5)

    def test_midpoint_refinement_order(self):
        # smooth x-dependent data: observed order of the interior rule >= 1.9
        exact = (4.0 + 2.0 * math.sin(1.0)) * 2.0
        errs = []
        for nx in (8, 16, 32, 64):
            phase, _, _ = build_grids(Slab(1.0), nx=nx, nv=16)
            val = float(np.dot(phase.weights, 2.0 + np.cos(phase.positions[:, 0])))
            errs.append(abs(val - exact))
        order = np.polyfit(np.log([8, 16, 32, 64]), np.log(errs), 1)[0]
        assert -order >= 1.9


class TestInterpolation:
    def test_exact_at_nodes(self, slab_grids, rng):
        phase = slab_grids[0]
        f = DensityField(phase, rng.standard_normal(len(phase)))
        for i in rng.integers(0, len(phase), 25):
            assert interpolate(f, phase.positions[i], phase.velocities[i]) \
                == pytest.approx(f.values[i], rel=1e-14, abs=1e-14)

    def test_linear_in_x_reproduced_between_nodes(self, slab_grids, rng):
        phase = slab_grids[0]
        f = field_from_function(phase, lambda X, V: 0.3 + 1.7 * X[:, 0])
        for _ in range(25):
            x = rng.uniform(-0.96, 0.96)
            k = rng.integers(0, len(phase.vel_table))
            v = phase.vel_table[k]
            assert interpolate(f, [x], v) == pytest.approx(0.3 + 1.7 * x, rel=1e-12)

    def test_constant_everywhere(self, ball_grids, rng):
        phase = ball_grids[0]
        f = DensityField(phase, np.full(len(phase), 2.5))
        for _ in range(25):
            u = rng.normal(size=2)
            x = 0.95 * rng.uniform(0, 1) * u / np.linalg.norm(u)
            v = phase.vel_table[rng.integers(0, len(phase.vel_table))]
            assert interpolate(f, x, v) == pytest.approx(2.5, rel=1e-13)

    def test_out_of_hull_raises(self, slab_grids):
        f = DensityField(slab_grids[0], np.ones(len(slab_grids[0])))
        with pytest.raises(OutOfHullError):
            interpolate(f, [1.2], [0.5])


class TestBuilders:
    def test_odd_velocity_count_rejected(self):
        with pytest.raises(GridError):
            build_grids(Slab(1.0), nx=10, nv=15)

    def test_cutoff_above_max_speed_rejected(self):
        with pytest.raises(GridError):
            build_grids(Slab(1.0), nx=10, nv=10, tangential_cutoff=2.0)

    def test_velocity_table_symmetric(self, slab_grids, ball_grids):
        for grids in (slab_grids, ball_grids):
            vt = grids[0].vel_table
            for v in vt:
                d = np.min(np.max(np.abs(vt + v[None, :]), axis=1))
                assert d <= 1e-12

    def test_slab_boundary_split(self, slab_grids):
        # incoming at -a means xi > 0; outgoing there means xi < 0
        _, tin, tout = slab_grids
        left = tin.boundary_coord < 0
        assert np.all(tin.velocities[left, 0] > 0)
        assert np.all(tin.velocities[~left, 0] < 0)
        left_out = tout.boundary_coord < 0
        assert np.all(tout.velocities[left_out, 0] < 0)

    def test_sojourn_cache_matches_direct_evaluation(self, triangle_grids, triangle):
        _, _, tout = triangle_grids
        assert np.allclose(tout.sojourn, tout.positions[:, 0], rtol=1e-14)


def test_field_csv_roundtrip(tmp_path, slab_grids, rng):
    phase = slab_grids[0]
    f = DensityField(phase, rng.standard_normal(len(phase)))
    path = tmp_path / "field.csv"
    write_field_csv(f, path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (len(phase), 4)
    assert np.allclose(data[:, 0], phase.positions[:, 0], rtol=0, atol=0)
    assert np.allclose(data[:, 3], f.values, rtol=0, atol=0)
