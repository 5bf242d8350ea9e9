import math

import numpy as np
import pytest
from scipy.integrate import quad

import freestream.boundary_ops as bops
from freestream import (
    Ball,
    PopulationTriangle,
    Slab,
    TraceField,
    build_grids,
    norm_p,
)
from freestream.boundary_ops import (
    NonlocalKernelOperator,
    OperatorError,
    TruncationMask,
    ZeroOperator,
    bounce_back,
    criterion_epsilon0,
    maxwell_criterion_p1,
    maxwell_criterion_pq,
    maxwell_diffuse,
    maxwell_mix,
    maxwellian_half_flux,
    nonlocal_criterion_l1,
    operator_norm,
    sampled_norm_lower_bound,
    sojourn_damping,
    specular_reflection,
    transmission,
    truncate,
    wall_maxwellian,
)
from freestream.population import CellModel, birth_operator, mitosis_kernel, proportional_kernel


class TestApply:
    def test_zero_maps_everything_to_zero(self, slab_grids, rng):
        _, tin, tout = slab_grids
        H = ZeroOperator(tin, tout)
        assert np.all(H.apply(rng.standard_normal(len(tout))) == 0.0)

    def test_specular_ball_speed_data_invariant(self, ball_grids):
        _, tin, tout = ball_grids
        H = specular_reflection(tin, tout)
        g = np.sum(tout.velocities**2, axis=1)
        assert np.allclose(H.apply(g), np.sum(tin.velocities**2, axis=1),
                           rtol=1e-13)

    def test_scaled_bounce_back_on_ones(self, slab_grids):
        _, tin, tout = slab_grids
        H = bounce_back(tin, tout, scale=2.0)
        assert np.allclose(H.apply(np.ones(len(tout))), 2.0)

    def test_pure_inheritance_birth_law(self, triangle_grids):
        # kernel 0 with inheritance fraction 0.5 halves the division trace
        _, tin, tout = triangle_grids
        H = transmission(tin, tout, scale=0.5)
        assert np.allclose(H.apply(np.ones(len(tout))), 0.5)

    def test_grid_mismatch_rejected(self, slab_grids, ball_grids):
        _, tin, tout = slab_grids
        H = bounce_back(tin, tout)
        with pytest.raises(OperatorError):
            H.apply(np.ones(len(ball_grids[2])))


class TestConservation:
    @pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
    def test_reflections_preserve_norms(self, ball_grids, slab_grids, p, rng):
        for grids, factory in ((ball_grids, specular_reflection),
                               (ball_grids, bounce_back),
                               (slab_grids, bounce_back)):
            _, tin, tout = grids
            H = factory(tin, tout)
            assert H.weight_preserving
            g = rng.standard_normal(len(tout))
            n_out = norm_p(TraceField(tout, g), p)
            n_in = norm_p(TraceField(tin, H.apply(g)), p)
            assert n_in == pytest.approx(n_out, rel=1e-12)


class TestOperatorNorm:
    def test_specular_norm_is_one(self, ball_grids):
        _, tin, tout = ball_grids
        H = specular_reflection(tin, tout)
        assert operator_norm(H, 1) == pytest.approx(1.0, abs=1e-10)
        assert operator_norm(H, 2) == pytest.approx(1.0, abs=1e-10)

    def test_scaled_bounce_back_norm(self, slab_grids):
        _, tin, tout = slab_grids
        H = bounce_back(tin, tout, scale=2.0)
        assert operator_norm(H, 1) == pytest.approx(2.0, abs=1e-12)
        assert operator_norm(H, 2) == pytest.approx(2.0, abs=1e-10)

    def test_wall_gaussian_half_flux(self):
        # independent quadrature oracle for the emitted-flux column mass
        m = wall_maxwellian(1.0, 1)
        oracle, err = quad(lambda u: u * float(m(np.array([u]))), 0.0, 8.0)
        assert err < 1e-9
        space = Slab(0.5, speeds=(-8.0, 8.0))
        _, tin, tout = build_grids(space, nx=4, nv=4000, tangential_cutoff=1e-3)
        H = maxwell_diffuse(tin, tout, theta0=1.0)
        assert operator_norm(H, 1) == pytest.approx(oracle, abs=1e-6)
        assert maxwellian_half_flux(1.0) == pytest.approx(oracle, abs=1e-12)

    def test_grid_normalization_gives_exact_norm(self, slab_grids):
        _, tin, tout = slab_grids
        H = maxwell_diffuse(tin, tout, normalization="grid", scale=0.9)
        assert operator_norm(H, 1) == pytest.approx(0.9, abs=1e-13)

    def test_sampled_lower_bound_is_a_lower_bound(self, slab_grids, rng):
        _, tin, tout = slab_grids
        H = maxwell_diffuse(tin, tout, normalization="grid", scale=0.9)
        lb = sampled_norm_lower_bound(H, 3.0, samples=100, rng=rng)
        assert 0.0 < lb <= 0.9 + 1e-9
        with pytest.raises(OperatorError):
            operator_norm(H, 3.0)


class TestTruncation:
    def test_mask_monotone_in_eps(self, slab_grids):
        _, _, tout = slab_grids
        m1 = TruncationMask.build(tout, 2.5)
        m2 = TruncationMask.build(tout, 5.0)
        assert np.all(m2.mask[m1.mask])

    def test_below_crossing_time_truncates_to_zero(self, slab_grids):
        _, tin, tout = slab_grids
        H = bounce_back(tin, tout, scale=2.0)
        assert operator_norm(truncate(H, 1.5), 1) == 0.0

    def test_above_max_sojourn_acts_identically(self, slab_grids, rng):
        _, tin, tout = slab_grids
        H = bounce_back(tin, tout, scale=2.0)
        T = truncate(H, float(tout.sojourn.max()) + 1.0)
        g = rng.standard_normal(len(tout))
        assert np.allclose(T.apply(g), H.apply(g), rtol=0, atol=0)

    def test_idempotent(self, slab_grids, rng):
        _, tin, tout = slab_grids
        H = bounce_back(tin, tout, scale=2.0)
        T1 = truncate(H, 3.0)
        T2 = truncate(T1, 3.0)
        g = rng.standard_normal(len(tout))
        assert np.allclose(T1.apply(g), T2.apply(g), rtol=0, atol=0)

    def test_profile_monotone(self, ball_grids):
        _, tin, tout = ball_grids
        H = maxwell_mix(tin, tout, alpha=0.5)
        eps = np.geomspace(tout.sojourn.min(), tout.sojourn.max(), 12)
        vals = [operator_norm(truncate(H, e), 1) for e in eps]
        assert np.all(np.diff(vals) >= -1e-12)
        assert vals[-1] <= operator_norm(H, 1) + 1e-12


class TestCriterionEpsilon0:
    def test_contraction_holds_with_infinite_threshold(self, slab_grids):
        _, tin, tout = slab_grids
        H = bounce_back(tin, tout, scale=0.5)
        res = criterion_epsilon0(H, 1)
        assert math.isinf(res.epsilon0)
        assert res.holds and res.growth_exponent == 0.0

    def test_slab_mitosis_threshold_at_crossing_time(self, slab_grids_inclusive):
        _, tin, tout = slab_grids_inclusive
        H = bounce_back(tin, tout, scale=2.0)
        res = criterion_epsilon0(H, 1)
        assert res.holds
        assert res.epsilon0 == pytest.approx(2.0, abs=1e-12)
        assert res.growth_exponent == pytest.approx(math.log(2) / 2.0, rel=1e-12)

    def test_ball_bounce_back_fails(self, unit_ball_grids):
        _, tin, tout = unit_ball_grids
        H = bounce_back(tin, tout, scale=2.0)
        res = criterion_epsilon0(H, 1)
        assert not res.holds
        assert res.epsilon0 == 0.0
        assert res.small_eps_limit == pytest.approx(2.0, rel=1e-10)
        assert all(v == pytest.approx(2.0, rel=1e-10) for _, v in res.profile)

    def test_p2_profile_agrees_on_mitosis(self, slab_grids_inclusive):
        _, tin, tout = slab_grids_inclusive
        H = bounce_back(tin, tout, scale=2.0)
        res = criterion_epsilon0(H, 2)
        assert res.holds and res.epsilon0 == pytest.approx(2.0, abs=1e-9)


class TestMaxwellCriteria:
    def test_pure_reflection_margin(self, unit_ball_grids):
        _, tin, tout = unit_ball_grids
        H = maxwell_mix(tin, tout, alpha=0.3, diffuse_scale=0.0)
        v = maxwell_criterion_p1(H)
        assert v.holds and v.margin == pytest.approx(0.7, abs=1e-12)

    def test_maxwell_model_on_ball_holds(self, unit_ball_grids):
        _, tin, tout = unit_ball_grids
        H = maxwell_mix(tin, tout, alpha=0.5)
        v = maxwell_criterion_p1(H)
        assert v.holds
        assert v.lhs_limit < 0.5 < v.rhs + v.lhs_limit + 1

    def test_full_reflection_with_diffuse_part_fails(self, unit_ball_grids):
        _, tin, tout = unit_ball_grids
        H = maxwell_mix(tin, tout, alpha=1.0, diffuse_scale=0.5)
        assert not maxwell_criterion_p1(H).holds

    def test_pq_zero_kernel_holds_whenever_alpha_below_one(self, unit_ball_grids):
        _, tin, tout = unit_ball_grids
        H = maxwell_mix(tin, tout, alpha=0.8, diffuse_scale=0.0)
        v = maxwell_criterion_pq(H, 2.0)
        assert v.holds and v.lhs_limit == 0.0

    def test_pq_f0_matches_quadrature_oracle(self):
        # separable wall-Gaussian kernel on the two-sided interval model,
        # p = 2: f0 = (int_{u<0} |u| M(u)^2 du) * (int_{u'>0} u' du')
        space = Slab(0.5, speeds=(-8.0, 8.0))
        _, tin, tout = build_grids(space, nx=4, nv=2000, tangential_cutoff=1e-3)
        K = maxwell_diffuse(tin, tout, theta0=1.0)
        m = wall_maxwellian(1.0, 1)
        i1, _ = quad(lambda u: u * float(m(np.array([u]))) ** 2, 0, 8)
        i2 = 8.0**2 / 2
        f0 = bops._diffuse_f_eps(K, 2.0, float(tout.sojourn.max()))
        assert f0 == pytest.approx(i1 * i2, rel=1e-5)

    def test_f_eps_monotone(self, unit_ball_grids):
        _, tin, tout = unit_ball_grids
        K = maxwell_diffuse(tin, tout)
        eps = np.geomspace(tout.sojourn.min(), tout.sojourn.max(), 10)
        vals = [bops._diffuse_f_eps(K, 2.0, e) for e in eps]
        assert np.all(np.diff(vals) >= -1e-15)

    def test_verdicts_agree_with_direct_profiles(self, unit_ball_grids):
        _, tin, tout = unit_ball_grids
        for alpha, scale in ((0.5, None), (1.0, 0.5)):
            H = maxwell_mix(tin, tout, alpha=alpha, diffuse_scale=scale)
            assert maxwell_criterion_p1(H).holds == criterion_epsilon0(H, 1).holds
        H = maxwell_mix(tin, tout, alpha=0.5)
        assert maxwell_criterion_pq(H, 2.0).holds == criterion_epsilon0(H, 2).holds


class TestNonlocalCriterion:
    @pytest.fixture(scope="class")
    @staticmethod
    def lr_grids():
        return build_grids(PopulationTriangle(0.0, 1.0), nx=12, nv=160)

    def test_vanishing_column_kernel_holds(self, lr_grids):
        _, tin, tout = lr_grids
        H = birth_operator(CellModel(0.0, 1.0, kernel=proportional_kernel(1.0)),
                           tin, tout)
        v = nonlocal_criterion_l1(H)
        assert v.holds and v.lhs_limit < 0.05
        # the same operator still doubles the uniform source
        g = np.ones(len(tout))
        assert norm_p(TraceField(tin, H.apply(g)), 1) == pytest.approx(
            2.0 * norm_p(TraceField(tout, g), 1), rel=1e-12)

    def test_constant_kernel_fails(self, lr_grids):
        _, tin, tout = lr_grids
        H = birth_operator(CellModel(0.0, 1.0, kernel=mitosis_kernel(1.0)),
                           tin, tout)
        v = nonlocal_criterion_l1(H)
        assert not v.holds and v.lhs_limit == pytest.approx(2.0, rel=1e-12)

    def test_pure_contraction_margin(self, lr_grids):
        _, tin, tout = lr_grids
        H = birth_operator(CellModel(0.0, 1.0, c=0.9), tin, tout)
        v = nonlocal_criterion_l1(H)
        assert v.holds and v.margin == pytest.approx(0.1, abs=1e-12)

    def test_truncated_norm_equals_masked_column_mass(self, lr_grids):
        # for nonnegative kernels the two computations coincide exactly
        _, tin, tout = lr_grids
        K = birth_operator(CellModel(0.0, 1.0, kernel=proportional_kernel(1.0)),
                           tin, tout)
        cm = K.column_masses()
        for eps in (0.1, 0.3, 0.8):
            mask = tout.sojourn <= eps
            direct = float(cm[mask].max()) if mask.any() else 0.0
            assert operator_norm(truncate(K, eps), 1) == direct

    def test_negative_kernel_rejected(self, lr_grids):
        _, tin, tout = lr_grids
        K = NonlocalKernelOperator(tin, tout,
                                   lambda gi, go: np.full((len(gi), len(go)), -1.0))
        with pytest.raises(OperatorError):
            nonlocal_criterion_l1(K)


class TestFiniteRankCompactness:
    def test_low_rank_kernel_profile_vanishes_in_l2(self, unit_ball_grids):
        # finite-rank kernels lose all mass under the sojourn truncation in
        # L2: the truncated norm is bounded by the masked weight of the
        # kernel's source profiles, which shrinks with eps
        _, tin, tout = unit_ball_grids

        def low_rank(gi, go):
            a1 = 1.0 + 0.5 * gi.velocities[:, 0]
            b1 = 1.0 + 0.5 * go.velocities[:, 1]
            a2 = np.abs(gi.velocities[:, 1])
            b2 = np.ones(len(go))
            return np.outer(a1, b1) + np.outer(a2, b2)

        K = NonlocalKernelOperator(tin, tout, low_rank)
        C = specular_reflection(tin, tout, scale=0.4)
        H = bops.SumOperator([K, C])
        eps_min = float(tout.sojourn.min())
        measured = operator_norm(truncate(H, eps_min), 2)

        # rank-wise tail bound at the smallest resolved truncation scale
        mask = (tout.sojourn <= eps_min).astype(float)
        wi, wo = tin.weights, tout.weights
        tail = 0.0
        for a, b in ((1.0 + 0.5 * tin.velocities[:, 0], 1.0 + 0.5 * tout.velocities[:, 1]),
                     (np.abs(tin.velocities[:, 1]), np.ones(len(tout)))):
            na = math.sqrt(float(wi @ a**2))
            nb = math.sqrt(float(wo @ (mask * b)**2))
            tail += na * nb
        assert measured <= operator_norm(C, 2) + tail + 1e-12
        full = operator_norm(truncate(H, float(tout.sojourn.max())), 2)
        assert measured < 0.6 * full   # genuinely shrunk towards the contraction


class TestSojournDamping:
    def test_damped_norm_below_threshold(self, slab_grids_inclusive):
        _, tin, tout = slab_grids_inclusive
        H = bounce_back(tin, tout, scale=2.0)
        # q^eps < (1 - ||H chi_eps||)/||H|| at eps just inside the threshold
        q = (0.9 * 0.5) ** (1.0 / 2.0)
        Hq = sojourn_damping(H, q, k_cap=float(tout.sojourn.max()))
        assert operator_norm(Hq, 1) < 1.0

    def test_invalid_q_rejected(self, slab_grids):
        _, tin, tout = slab_grids
        H = bounce_back(tin, tout)
        with pytest.raises(OperatorError):
            sojourn_damping(H, 1.5, 1.0)
