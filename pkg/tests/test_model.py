import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from helpers import make_model
from sregame import (ConeSpec, CostCoefficients, GameModel, RegimeGenerator,
                     SystemCoefficients, compute_constants, full_cone,
                     orthant_cone, scale_cost)
from sregame.errors import (ConeUnsupported, DimensionMismatch,
                            NonPositiveScale)
from sregame.model import CONE_RAYS, em1x


def _unit_model(A=0.0, C=0.0, q0=True, K=0.0, G=0.25, T=1.0, l=1, B=0.0):
    nt = 1
    q = np.zeros((l, l))
    if not q0:
        q = np.full((l, l), 0.5)
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
    sys_co = SystemCoefficients(
        n=1, m1=1, m2=1,
        A=np.full((nt, l), A), B1=np.full((nt, l, 1), B),
        B2=np.full((nt, l, 1), B), b=np.zeros((nt, l)),
        C=np.full((nt, l, 1), C), D1=np.ones((nt, l, 1, 1)),
        D2=np.ones((nt, l, 1, 1)), sigma=np.zeros((nt, l, 1)))
    cost = CostCoefficients(
        K=np.full((nt, l), K), R11=np.full((nt, l, 1, 1), -4.0),
        R12=np.zeros((nt, l, 1, 1)), R22=np.full((nt, l, 1, 1), 4.0),
        G=np.full(l, G))
    return GameModel(T=T, N=10, gen=RegimeGenerator(q), sys=sys_co, cost=cost,
                     x0=1.0, i0=0)


class TestComputeConstants:
    def test_degenerate_limit_convention(self):
        # A = C = 0, q = 0, D = I, B = 0: c1 hits zero and c3 vanishes
        m = _unit_model(K=1.0, G=0.25)
        rep = compute_constants(m)
        assert rep.c1 == 0.0
        assert rep.cbar2 == 1.0
        assert rep.cunder2 == 1.0
        assert rep.c3 == 0.0
        # series limits: epsbar -> 2 (Kbar T + Gbar), epsilon -> 0
        assert_allclose(rep.epsbar, 2.0 * (1.0 * 1.0 + 0.25), rtol=1e-12)
        assert rep.epsilon == 0.0
        assert not rep.assumption3_ok

    def test_closed_formula_against_scalar_calculator(self):
        # independent evaluation of the two closed formulas
        kbar, gbar, c1, c3, l, T = 1.0, 0.25, 0.5, 0.25, 2, 1.0
        x = c1 * l
        e = np.exp(x * T)
        eps_expected = 8 * c3 * (e - 1) * (kbar * (e - 1) + gbar * x * e) / x ** 2
        ebar_expected = x * eps_expected / (4 * c3 * (e - 1))

        m = _unit_model(K=0.0, G=0.1, T=T, l=l)
        rep = compute_constants(dataclasses.replace(
            m, constant_floors={"c1": c1, "c3": c3, "kbar": kbar, "gbar": gbar}))
        # the scanned values of this degenerate model sit below every floor
        assert (rep.c1, rep.c3, rep.kbar, rep.gbar) == (c1, c3, kbar, gbar)
        assert_allclose(rep.epsilon, eps_expected, rtol=1e-12)
        assert_allclose(rep.epsbar, ebar_expected, rtol=1e-12)

    def test_positive_eigenvalue_in_r11_fails_assumption(self):
        m = make_model(seed=1)
        bad = dataclasses.replace(
            m, cost=CostCoefficients(
                K=m.cost.K, R11=-m.cost.R11, R12=m.cost.R12,
                R22=m.cost.R22, G=m.cost.G))
        assert not compute_constants(bad).assumption2_ok

    def test_idempotent(self):
        m = make_model(seed=2)
        a, b = compute_constants(m), compute_constants(m)
        assert a == b

    def test_regime_relabel_invariance(self):
        m = make_model(seed=3, l=3, n=2, m1=2, m2=1)
        perm = [2, 0, 1]
        s, c = m.sys, m.cost
        sys_p = SystemCoefficients(
            n=s.n, m1=s.m1, m2=s.m2, A=s.A[:, perm], B1=s.B1[:, perm],
            B2=s.B2[:, perm], b=s.b[:, perm], C=s.C[:, perm],
            D1=s.D1[:, perm], D2=s.D2[:, perm], sigma=s.sigma[:, perm])
        cost_p = CostCoefficients(K=c.K[:, perm], R11=c.R11[:, perm],
                                  R12=c.R12[:, perm], R22=c.R22[:, perm],
                                  G=c.G[perm])
        qp = m.gen.q[np.ix_(perm, perm)]
        mp = GameModel(T=m.T, N=m.N, gen=RegimeGenerator(qp), sys=sys_p,
                       cost=cost_p, x0=m.x0, i0=0)
        ra, rb = compute_constants(m), compute_constants(mp)
        for name in ("c1", "cbar2", "cunder2", "c3", "kbar", "gbar",
                     "epsilon", "epsbar"):
            assert getattr(ra, name) == getattr(rb, name)

    def test_flags_imply_scale_gap(self):
        for seed in range(5):
            rep = compute_constants(make_model(seed=seed))
            assert rep.all_ok
            assert rep.epsilon > 2.0 * rep.cbar2


class TestScaleCost:
    def test_identity(self):
        m = make_model(seed=4)
        m2 = scale_cost(m, 1.0)
        assert np.array_equal(m2.cost.K, m.cost.K)
        assert np.array_equal(m2.cost.G, m.cost.G)

    def test_scalar_multiplication(self):
        m = _unit_model(G=-0.25)
        m2 = scale_cost(m, 2.0)
        assert m2.cost.G[0] == -0.5
        assert np.array_equal(m2.sys.A, m.sys.A)

    def test_rejects_nonpositive(self):
        m = make_model(seed=5)
        with pytest.raises(NonPositiveScale):
            scale_cost(m, 0.0)
        with pytest.raises(NonPositiveScale):
            scale_cost(m, -2.0)

    def test_rescue_of_failing_scale_gap(self):
        # B != 0 so c3 > 0, but K, G small: epsilon <= 2 cbar2 fails
        m = _unit_model(K=0.05, G=0.05, B=0.3, A=0.1)
        rep = compute_constants(m)
        assert rep.assumption2_ok and not rep.assumption3_ok
        ctilde = 2.0 * rep.cbar2 / rep.epsilon * 1.05
        rep2 = compute_constants(scale_cost(m, ctilde))
        assert rep2.assumption1_ok and rep2.assumption2_ok and rep2.assumption3_ok

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(0.25, 4.0), b=st.floats(0.25, 4.0))
    def test_composition(self, a, b):
        m = make_model(seed=6)
        lhs = scale_cost(scale_cost(m, a), b)
        rhs = scale_cost(m, a * b)
        for name in ("K", "R11", "R12", "R22", "G"):
            assert_allclose(getattr(lhs.cost, name), getattr(rhs.cost, name),
                            rtol=1e-12, atol=1e-12)


class TestValidation:
    def test_rate_matrix_must_balance(self):
        with pytest.raises(DimensionMismatch):
            RegimeGenerator(np.array([[-1.0, 0.5], [0.5, -0.5]]))
        with pytest.raises(DimensionMismatch):
            RegimeGenerator(np.array([[0.5, -0.5], [0.0, 0.0]]))

    def test_shape_mismatch(self):
        m = make_model(seed=7)
        bad_cost = CostCoefficients(
            K=m.cost.K[:, :1], R11=m.cost.R11[:, :1], R12=m.cost.R12[:, :1],
            R22=m.cost.R22[:, :1], G=m.cost.G[:1])
        with pytest.raises(DimensionMismatch):
            GameModel(T=m.T, N=m.N, gen=m.gen, sys=m.sys, cost=bad_cost,
                      x0=0.0, i0=0)

    def test_asymmetric_weight_rejected(self):
        with pytest.raises(DimensionMismatch):
            CostCoefficients(
                K=np.zeros((1, 1)), R11=np.array([[[[1.0, 0.5], [0.0, 1.0]]]]),
                R12=np.zeros((1, 1, 2, 1)), R22=np.ones((1, 1, 1, 1)),
                G=np.zeros(1))

    def test_cones_require_homogeneous(self):
        m = make_model(seed=8, homogeneous=False)
        with pytest.raises(DimensionMismatch):
            dataclasses.replace(m, cones=(orthant_cone(m.sys.m1),
                                          full_cone(m.sys.m2)))
        make_model(seed=8, homogeneous=True,
                   cones=(orthant_cone(1), full_cone(1)))

    def test_initial_regime_range(self):
        m = make_model(seed=9, l=2)
        with pytest.raises(DimensionMismatch):
            dataclasses.replace(m, i0=2)


class TestCones:
    def test_orthant_projection(self):
        cone = orthant_cone(3)
        v = np.array([1.0, -2.0, 0.5])
        assert_allclose(cone.project(v), [1.0, 0.0, 0.5])
        assert cone.contains([0.0, 0.0, 0.0])
        assert not cone.contains([-1e-3, 1.0, 1.0])

    def test_rays_cone_normalizes_and_projects(self):
        cone = ConeSpec(CONE_RAYS, 2, rays=np.array([[2.0, 0.0], [1.0, 1.0]]))
        assert_allclose(np.linalg.norm(cone.rays, axis=1), 1.0)
        inside = 0.7 * cone.rays[0] + 0.1 * cone.rays[1]
        assert cone.contains(inside, tol=1e-10)
        assert cone.distance([-1.0, 0.0]) > 0.5

    def test_zero_always_member(self):
        for cone in (full_cone(2), orthant_cone(2),
                     ConeSpec(CONE_RAYS, 2, rays=np.array([[0.0, 1.0]]))):
            assert cone.contains(np.zeros(2))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConeUnsupported):
            ConeSpec("ball", 2)


def test_em1x_limit():
    assert em1x(0.0) == 1.0
    assert_allclose(em1x(1e-12), 1.0 + 5e-13, rtol=1e-12)
    assert_allclose(em1x(0.3), np.expm1(0.3) / 0.3, rtol=1e-15)


def test_time_varying_tables_accepted():
    m = make_model(seed=10, time_varying=True, N=50)
    rep = compute_constants(m)
    assert rep.all_ok
    assert m.sys.nt == 51
    assert m.table_index(0.0) == 0
    assert m.table_index(m.T) == 50
