import math

import numpy as np
import pytest

from freestream import (
    DensityField,
    PopulationTriangle,
    SemigroupRun,
    Slab,
    ZeroOperator,
    bounce_back,
    build_grids,
    laplace_transform,
    maxwell_diffuse,
    norm_p,
)
from freestream.population import CellModel, birth_operator, mitosis_kernel
from freestream.resolvent import (
    ResolventNotCertified,
    ResolventOperators,
    batty_balance,
    norm_bound_table,
)


@pytest.fixture(scope="module")
def slab_setup():
    s = Slab(1.0)
    phase, tin, tout = build_grids(s, nx=400, nv=60)
    return s, phase, tin, tout, ResolventOperators(s, phase, tin, tout)


class TestClosedForms:
    def test_m_lambda_on_constants(self, slab_setup):
        _, _, tin, tout, ops = slab_setup
        got = ops.m_lambda(np.ones(len(tin)), 1.3)
        assert np.allclose(got, np.exp(-1.3 * tout.sojourn), rtol=1e-13)

    def test_b_lambda_on_constants(self, slab_setup):
        _, phase, tin, _, ops = slab_setup
        got = ops.b_lambda(np.ones(len(tin)), 0.7)
        assert np.allclose(got, np.exp(-0.7 * phase.sojourn_times()), rtol=1e-13)

    def test_c_and_g_lambda_on_constants(self, slab_setup):
        _, phase, _, tout, ops = slab_setup
        lam = 1.0
        c = ops.c_lambda(np.ones(len(phase)), lam)
        g = ops.g_lambda(np.ones(len(phase)), lam)
        assert np.allclose(c, (1 - np.exp(-lam * phase.sojourn_times())) / lam,
                           rtol=1e-11)
        assert np.allclose(g, (1 - np.exp(-lam * tout.sojourn)) / lam, rtol=1e-11)

    def test_slab_m_lambda_sup_bound(self, slab_setup, rng):
        # every outgoing flight takes at least the 2a crossing
        _, _, tin, _, ops = slab_setup
        for lam in (0.5, 1.0):
            u = rng.random(len(tin))
            got = np.max(np.abs(ops.m_lambda(u, lam)))
            assert got <= math.exp(-2.0 * lam / 1.0) * np.max(u) * (1 + 1e-12)

    def test_b_lambda_l1_against_fine_quadrature(self):
        s = Slab(1.0)
        coarse = build_grids(s, nx=120, nv=40)
        fine = build_grids(s, nx=2400, nv=40)
        vals = []
        for phase, tin, tout in (coarse, fine):
            ops = ResolventOperators(s, phase, tin, tout)
            vals.append(float(np.dot(phase.weights,
                                     ops.b_lambda(np.ones(len(tin)), 1.0))))
        assert vals[0] == pytest.approx(vals[1], rel=1e-6)


class TestNormBoundTable:
    @pytest.mark.parametrize("p,lam", [(1.0, 0.8), (2.0, 1.5)])
    def test_bounds_hold_on_random_inputs(self, slab_setup, p, lam, rng):
        _, phase, tin, tout, ops = slab_setup
        b = norm_bound_table(p, lam)

        def wn(grid, v):
            return norm_p(DensityField(grid, v), p) if grid is phase \
                else float(np.dot(grid.weights, np.abs(v)**p) ** (1 / p))

        for _ in range(50):
            u = rng.random(len(tin))
            f = rng.random(len(phase))
            nu, nf = wn(tin, u), wn(phase, f)
            assert wn(tout, ops.m_lambda(u, lam)) <= b["M"] * nu * (1 + 1e-10)
            assert wn(phase, ops.b_lambda(u, lam)) <= b["B"] * nu * (1 + 1e-10)
            assert wn(tout, ops.g_lambda(f, lam)) <= b["G"] * nf * (1 + 1e-10)
            assert wn(phase, ops.c_lambda(f, lam)) <= b["C"] * nf * (1 + 1e-10)


class TestResolventApply:
    def test_zero_wall_reduces_to_c_lambda(self, slab_setup, rng):
        _, phase, tin, tout, ops = slab_setup
        H = ZeroOperator(tin, tout)
        phi = rng.random(len(phase))
        psi, info = ops.resolvent_apply(H, phi, 1.0)
        assert np.allclose(psi, ops.c_lambda(phi, 1.0), rtol=0, atol=0)

    def test_mitosis_series_contracts_at_the_predicted_ratio(self, slab_setup):
        _, phase, tin, tout, ops = slab_setup
        H = bounce_back(tin, tout, scale=2.0)
        lam = 1.0
        phi = np.cos(np.pi * phase.positions[:, 0] / 2)
        psi, info = ops.resolvent_apply(H, phi, lam)
        bound = 2.0 * math.exp(-lam * float(tout.sojourn.min()))
        assert info.certified and info.last_ratio <= bound * (1 + 1e-9)
        assert info.tail_bound <= 1e-9 * norm_p(DensityField(phase, psi), 1)

    def test_uncertified_lambda_raises(self, slab_setup):
        _, phase, tin, tout, ops = slab_setup
        H = bounce_back(tin, tout, scale=2.0)
        with pytest.raises(ResolventNotCertified):
            ops.resolvent_apply(H, np.ones(len(phase)), 0.1)

    def test_laplace_cross_check(self, slab_setup):
        s, phase, tin, tout, ops = slab_setup
        H = bounce_back(tin, tout, scale=2.0)

        def phi_fn(X, V):
            return np.cos(np.pi * X[:, 0] / 2)

        phi = phi_fn(phase.positions, phase.velocities)
        run = SemigroupRun(space=s, phase=phase, trace_in=tin, trace_out=tout,
                           H=H, initial=phi_fn, p=1.0, t_final=26.0, dt=0.25)
        lams = [1.0, 2.0]
        lap = laplace_transform(run, lams, engine="billiard", dt_sample=0.05)
        for lam in lams:
            psi, _ = ops.resolvent_apply(H, phi, lam)
            rel = norm_p(DensityField(phase, lap[lam] - psi), 1) \
                / norm_p(DensityField(phase, psi), 1)
            assert rel <= 1e-3

    def test_resolvent_identity(self):
        # (lam - mu) R(lam) R(mu) phi = R(mu) phi - R(lam) phi
        s = Slab(1.0)
        phase, tin, tout = build_grids(s, nx=1600, nv=60)
        ops = ResolventOperators(s, phase, tin, tout)
        H = maxwell_diffuse(tin, tout, normalization="grid", scale=0.9)
        phi = np.cos(np.pi * phase.positions[:, 0] / 2)
        lam, mu = 1.0, 2.0
        r_mu, _ = ops.resolvent_apply(H, phi, mu)
        r_lam, _ = ops.resolvent_apply(H, phi, lam)
        lhs, _ = ops.resolvent_apply(H, r_mu, lam)
        lhs = (lam - mu) * lhs
        rhs = r_mu - r_lam
        rel = norm_p(DensityField(phase, lhs - rhs), 1) \
            / norm_p(DensityField(phase, rhs), 1)
        assert rel <= 1e-6


class TestBalance:
    def test_zero_wall_balance(self, slab_setup):
        _, phase, tin, tout, ops = slab_setup
        H = ZeroOperator(tin, tout)
        phi = np.cos(np.pi * phase.positions[:, 0] / 2)
        rep = batty_balance(ops, H, phi, 2.0)
        assert rep.incoming_mass == 0.0
        assert rep.relative_residual <= 1e-5

    def test_contraction_balance(self, slab_setup):
        _, phase, tin, tout, ops = slab_setup
        H = maxwell_diffuse(tin, tout, normalization="grid", scale=0.9)
        phi = np.cos(np.pi * phase.positions[:, 0] / 2)
        rep = batty_balance(ops, H, phi, 2.0)
        assert rep.relative_residual <= 1e-5
        assert not rep.expanding

    def test_expanding_birth_law_forces_inverse_estimate(self):
        tsp = PopulationTriangle(0.3, 1.0)
        phase, tin, tout = build_grids(tsp, nx=300, nv=160)
        ops = ResolventOperators(tsp, phase, tin, tout)
        H = birth_operator(CellModel(0.3, 1.0, kernel=mitosis_kernel(1.0, 0.3)),
                           tin, tout)
        lam = 2.0
        rep = batty_balance(ops, H, np.ones(len(phase)), lam)
        assert rep.relative_residual <= 1e-5
        assert rep.expanding and rep.lower_bound_holds
        assert rep.psi_mass >= rep.source_mass / lam

    def test_negative_data_rejected(self, slab_setup):
        _, phase, tin, tout, ops = slab_setup
        with pytest.raises(ValueError):
            batty_balance(ops, ZeroOperator(tin, tout),
                          -np.ones(len(phase)), 1.0)
