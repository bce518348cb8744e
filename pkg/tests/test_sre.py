import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose

from helpers import (degenerate_scalar_model, make_factor_model, make_market,
                     make_model, mirror_model, scalar_exact_solution,
                     steep_truncation_model)
from sregame import (CostCoefficients, GameModel, RegimeGenerator,
                     SystemCoefficients, TimeGrid, compute_constants,
                     comparison_envelope, market_constants,
                     monotone_truncated_sequence, orthant_cone, sample_paths,
                     solve_linear_bsde, solve_sre, solve_sre_constrained,
                     solve_sre_random, to_game)
from sregame.errors import (BoundViolation, GridMismatch,
                            RegressionIllConditioned, StepRejected)


class TestSolveSre:
    def test_terminal_condition_exact(self):
        for seed in (0, 1):
            m = make_model(seed=seed, l=3, n=2, m1=1, m2=2, N=60)
            sol = solve_sre(m)
            assert np.array_equal(sol.P[-1], m.cost.G)

    def test_zero_generator_keeps_terminal(self):
        # K = 0, B = C = 0, A = 0, q = 0: nothing moves
        gen = RegimeGenerator(np.zeros((2, 2)))
        nt, l = 1, 2
        sys_co = SystemCoefficients(
            n=1, m1=1, m2=1, A=np.zeros((nt, l)), B1=np.zeros((nt, l, 1)),
            B2=np.zeros((nt, l, 1)), b=np.zeros((nt, l)), C=np.zeros((nt, l, 1)),
            D1=np.ones((nt, l, 1, 1)), D2=np.ones((nt, l, 1, 1)),
            sigma=np.zeros((nt, l, 1)))
        cost = CostCoefficients(
            K=np.zeros((nt, l)), R11=np.full((nt, l, 1, 1), -4.0),
            R12=np.zeros((nt, l, 1, 1)), R22=np.full((nt, l, 1, 1), 4.0),
            G=np.array([0.3, -0.2]))
        m = GameModel(T=1.0, N=50, gen=gen, sys=sys_co, cost=cost, x0=1.0, i0=0)
        sol = solve_sre(m)
        assert_allclose(sol.P, np.broadcast_to(cost.G, (51, 2)), atol=1e-14)

    def test_scalar_closed_form_oracle(self):
        a, k0, G = 0.4, 0.3, 0.25
        m = degenerate_scalar_model(a, k0, G)
        sol = solve_sre(m)
        exact = scalar_exact_solution(sol.grid.nodes(), a, k0, G, m.T)
        assert np.abs(sol.P[:, 0] - exact).max() < 1e-10

    def test_rk4_order(self):
        m = degenerate_scalar_model()
        p = {N: solve_sre(m, TimeGrid(m.T, N)).P[0, 0] for N in (100, 200, 400)}
        ratio = abs(p[100] - p[200]) / abs(p[200] - p[400])
        assert 8.0 <= ratio <= 32.0

    def test_portfolio_equation_terminal_and_band(self):
        market = make_market(seed=3, l=2, N=200)
        game = to_game(market)
        cons = market_constants(market)
        sol = solve_sre(game)
        assert np.all(sol.P[-1] == -0.25)
        assert np.abs(sol.P).max() <= cons.eps2 + 1e-8
        assert sol.bound_ok.all()

    def test_envelope_containment_random(self):
        for seed in range(4):
            m = make_model(seed=seed, l=2, n=2, m1=2, m2=1, N=150)
            rep = compute_constants(m)
            sol = solve_sre(m)
            env = comparison_envelope(m, rep)
            pb = env.pbar(sol.grid.nodes())[:, None]
            assert np.all(sol.P <= pb + 1e-8)
            assert np.all(sol.P >= -pb - 1e-8)
            assert sol.certified

    def test_regime_permutation_equivariance(self):
        m = make_model(seed=5, l=3, N=80)
        perm = [1, 2, 0]
        s, c = m.sys, m.cost
        sys_p = SystemCoefficients(
            n=s.n, m1=s.m1, m2=s.m2, A=s.A[:, perm], B1=s.B1[:, perm],
            B2=s.B2[:, perm], b=s.b[:, perm], C=s.C[:, perm],
            D1=s.D1[:, perm], D2=s.D2[:, perm], sigma=s.sigma[:, perm])
        cost_p = CostCoefficients(K=c.K[:, perm], R11=c.R11[:, perm],
                                  R12=c.R12[:, perm], R22=c.R22[:, perm],
                                  G=c.G[perm])
        mp = GameModel(T=m.T, N=m.N, gen=RegimeGenerator(m.gen.q[np.ix_(perm, perm)]),
                       sys=sys_p, cost=cost_p, x0=m.x0, i0=0)
        a = solve_sre(m)
        b = solve_sre(mp)
        assert_allclose(b.P, a.P[:, perm], atol=1e-12)

    def test_step_rejected_on_blowup(self):
        m = degenerate_scalar_model(a=0.4, G=1e308)
        with np.errstate(over="ignore"), pytest.raises(StepRejected):
            solve_sre(m)

    def test_factor_mode_refused(self):
        _, fmodel = make_factor_model(seed=0, N=40)
        with pytest.raises(ValueError):
            solve_sre(fmodel)

    def test_piecewise_constant_tables_two_phase_oracle(self):
        # A switches value at T/2; chain the scalar closed form
        a0, a1, k0, G = 0.5, -0.3, 0.4, 0.2
        nt, l = 3, 1
        gen = RegimeGenerator(np.zeros((1, 1)))
        A = np.array([[a0], [a1], [a1]])
        sys_co = SystemCoefficients(
            n=1, m1=1, m2=1, A=A, B1=np.zeros((nt, l, 1)),
            B2=np.zeros((nt, l, 1)), b=np.zeros((nt, l)),
            C=np.zeros((nt, l, 1)), D1=np.ones((nt, l, 1, 1)),
            D2=np.ones((nt, l, 1, 1)), sigma=np.zeros((nt, l, 1)))
        cost = CostCoefficients(
            K=np.full((nt, l), k0), R11=np.full((nt, l, 1, 1), -4.0),
            R12=np.zeros((nt, l, 1, 1)), R22=np.full((nt, l, 1, 1), 4.0),
            G=np.array([G]))
        m = GameModel(T=1.0, N=2, gen=gen, sys=sys_co, cost=cost, x0=1.0, i0=0)
        sol = solve_sre(m, TimeGrid(1.0, 512))
        t = sol.grid.nodes()
        from helpers import scalar_exact_solution as closed

        def exact(tv):
            pm = closed(0.5, a1, k0, G, 1.0)
            late = (G + k0 / (2 * a1)) * np.exp(2 * a1 * (1.0 - tv)) - k0 / (2 * a1)
            early = (pm + k0 / (2 * a0)) * np.exp(2 * a0 * (0.5 - tv)) - k0 / (2 * a0)
            return np.where(tv >= 0.5, late, early)

        assert np.abs(sol.P[:, 0] - exact(t)).max() < 1e-10


class TestLinearBsde:
    def test_homogeneous_forcing_gives_zero(self):
        m = make_model(seed=1, homogeneous=True, N=80)
        sol = solve_sre(m)
        phi = solve_linear_bsde(m, sol)
        assert np.all(phi.phi == 0.0)
        assert np.all(phi.phi[-1] == 0.0)

    def test_constant_drift_quadrature_oracle(self):
        # b = beta, A = B = C = sigma = 0, q = 0: phi(t) = beta * int_t^T P ds
        beta, G = 0.7, 0.3
        nt, l = 1, 1
        gen = RegimeGenerator(np.zeros((1, 1)))
        sys_co = SystemCoefficients(
            n=1, m1=1, m2=1, A=np.zeros((nt, l)), B1=np.zeros((nt, l, 1)),
            B2=np.zeros((nt, l, 1)), b=np.full((nt, l), beta),
            C=np.zeros((nt, l, 1)), D1=np.ones((nt, l, 1, 1)),
            D2=np.ones((nt, l, 1, 1)), sigma=np.zeros((nt, l, 1)))
        cost = CostCoefficients(
            K=np.full((nt, l), 0.4), R11=np.full((nt, l, 1, 1), -4.0),
            R12=np.zeros((nt, l, 1, 1)), R22=np.full((nt, l, 1, 1), 4.0),
            G=np.array([G]))
        m = GameModel(T=1.0, N=800, gen=gen, sys=sys_co, cost=cost, x0=0.0, i0=0)
        sol = solve_sre(m)
        phi = solve_linear_bsde(m, sol)
        t = sol.grid.nodes()
        # independent quadrature of the stored field (cumulative trapezoid)
        cum = np.concatenate([[0.0], np.cumsum(
            0.5 * (sol.P[1:, 0] + sol.P[:-1, 0]) * sol.grid.dt)])
        oracle = beta * (cum[-1] - cum)
        assert np.abs(phi.phi[:, 0] - oracle).max() < 1e-6

    def test_forcing_linearity(self):
        m = make_model(seed=2, N=100)
        # zero out sigma so the affine term is linear in b
        s = m.sys
        sys0 = SystemCoefficients(n=s.n, m1=s.m1, m2=s.m2, A=s.A, B1=s.B1,
                                  B2=s.B2, b=s.b, C=s.C, D1=s.D1, D2=s.D2,
                                  sigma=np.zeros_like(s.sigma))
        sys2 = SystemCoefficients(n=s.n, m1=s.m1, m2=s.m2, A=s.A, B1=s.B1,
                                  B2=s.B2, b=2.0 * s.b, C=s.C, D1=s.D1, D2=s.D2,
                                  sigma=np.zeros_like(s.sigma))
        m1 = dataclasses.replace(m, sys=sys0)
        m2 = dataclasses.replace(m, sys=sys2)
        sol1, sol2 = solve_sre(m1), solve_sre(m2)
        phi1 = solve_linear_bsde(m1, sol1)
        phi2 = solve_linear_bsde(m2, sol2)
        assert_allclose(phi2.phi, 2.0 * phi1.phi, atol=1e-12)

    def test_grid_mismatch_detected(self):
        m = make_model(seed=3, N=100)
        sol = solve_sre(m)
        with pytest.raises(GridMismatch):
            solve_linear_bsde(m, sol, TimeGrid(m.T, 50))

    def test_foreign_solution_rejected(self):
        m1 = make_model(seed=4, N=100)
        m2 = make_model(seed=5, N=100)
        sol2 = solve_sre(m2)
        with pytest.raises(GridMismatch):
            solve_linear_bsde(m1, sol2)


class TestConstrained:
    def test_full_space_coincides_with_unconstrained(self):
        for seed in (0, 3):
            m = make_model(seed=seed, homogeneous=True, N=120)
            pos, neg = solve_sre_constrained(m)
            sol = solve_sre(m)
            assert np.abs(pos.P - sol.P).max() <= 1e-8
            assert np.abs(neg.P - sol.P).max() <= 1e-8

    def test_mirror_duality(self):
        # player swap with cost negation flips the sign of both branches
        m = make_model(seed=6, homogeneous=True, N=100,
                       cones=(orthant_cone(1), orthant_cone(1)))
        mm = mirror_model(m)
        pos, neg = solve_sre_constrained(m)
        pos_m, neg_m = solve_sre_constrained(mm)
        assert_allclose(pos_m.P, -pos.P, atol=1e-9)
        assert_allclose(neg_m.P, -neg.P, atol=1e-9)

    def test_terminal_and_band(self):
        m = make_model(seed=7, homogeneous=True, N=100,
                       cones=(orthant_cone(1), orthant_cone(1)))
        pos, neg = solve_sre_constrained(m)
        assert np.array_equal(pos.P[-1], m.cost.G)
        assert np.array_equal(neg.P[-1], m.cost.G)
        assert pos.bound_ok.all() and neg.bound_ok.all()

    def test_requires_homogeneous(self):
        m = make_model(seed=8, homogeneous=False)
        with pytest.raises(ValueError):
            solve_sre_constrained(m)


class TestMonotoneTruncation:
    def test_sequence_monotone_envelope_and_convergent(self):
        m = steep_truncation_model(N=80)
        grid = TimeGrid(m.T, 80)
        sols = monotone_truncated_sequence(m, grid, [1, 4, 16])
        sol = solve_sre(m, grid)
        p0 = [s.P[0] for s in sols]
        assert all((a - b >= -1e-9).all() for a, b in zip(p0, p0[1:]))
        gaps = [np.abs(s.P[0] - sol.P[0]).max() for s in sols]
        assert all(a >= b - 1e-12 for a, b in zip(gaps, gaps[1:]))
        assert gaps[0] > 1e-3  # nontrivially truncated at k = 1
        for s in sols:
            assert s.envelope_ok.all()
            assert (s.P >= sol.P - 1e-9).all()

    def test_huge_k_matches_plain_solve(self):
        m = make_model(seed=2, N=60)
        grid = TimeGrid(m.T, 60)
        [s] = monotone_truncated_sequence(m, grid, [10 ** 6])
        sol = solve_sre(m, grid)
        assert np.abs(s.P - sol.P).max() < 1e-6

    def test_rejects_unsorted_ks(self):
        m = make_model(seed=2, N=60)
        with pytest.raises(ValueError):
            monotone_truncated_sequence(m, None, [4, 2])


class TestRandomMode:
    def test_constant_coefficients_reproduce_deterministic(self):
        base, fmodel = make_factor_model(seed=4, N=150)
        det = solve_sre(base)
        grid = TimeGrid(base.T, 150)
        bundle = sample_paths(fmodel, grid, 4000, seed=11)
        rnd = solve_sre_random(fmodel, grid, bundle, basis_degree=2)
        assert np.abs(rnd.P[0] - det.P[0]).max() < 5e-3
        assert np.all(rnd.P_paths[:, -1, :] == base.cost.G[None, :])
        assert rnd.violation_fraction == 0.0

    def test_truly_random_coefficients_run(self):
        import dataclasses as dc
        base = make_model(seed=9, N=80)

        def factor_fn(t, i, y):
            # drift modulated by the running Brownian level, bounded
            return {"A": float(base.sys.A[0, i]) + 0.05 * np.tanh(y[:, 0])}

        fmodel = dc.replace(base, sys=dc.replace(
            base.sys, mode="factor", factor_fn=factor_fn))
        grid = TimeGrid(base.T, 80)
        bundle = sample_paths(fmodel, grid, 2000, seed=5)
        rnd = solve_sre_random(fmodel, grid, bundle, basis_degree=2)
        assert np.all(np.isfinite(rnd.P_paths))
        assert np.all(rnd.P_paths[:, -1, :] == base.cost.G[None, :])
        assert rnd.violation_fraction == 0.0
        # the field genuinely varies across paths now
        assert rnd.P_paths[:, 0, 0].std() > 0.0

    def test_deterministic_model_refused(self):
        m = make_model(seed=1, N=40)
        grid = TimeGrid(m.T, 40)
        bundle = sample_paths(m, grid, 100, seed=0)
        with pytest.raises(ValueError):
            solve_sre_random(m, grid, bundle, basis_degree=2)

    def test_ill_conditioned_regression_detected(self):
        from sregame.sre import _regress
        rng = np.random.default_rng(0)
        col = rng.normal(size=200)
        phi = np.stack([np.ones(200), col, col * (1.0 + 1e-14)], axis=1)
        with pytest.raises(RegressionIllConditioned):
            _regress(phi, rng.normal(size=200))


def test_envelope_identities():
    m = make_model(seed=3)
    rep = compute_constants(m)
    env = comparison_envelope(m, rep)
    assert_allclose(env.pbar(0.0), rep.epsbar, rtol=1e-10)
    assert_allclose(env.punder(0.0), -rep.epsbar, rtol=1e-10)
    assert_allclose(env.pbar(m.T), rep.gbar, rtol=1e-12)
    mid = env.pbar(m.T / 2.0)
    assert rep.gbar <= mid <= rep.epsbar
    t = np.linspace(0, m.T, 9)
    vals = env.pbar(t)
    assert np.all(np.diff(vals) <= 1e-12)


def test_bound_violation_raised_when_certified():
    # force an absurdly tight epsbar through floors that shrink nothing:
    # instead solve a model whose assumptions pass but inject a wrong G
    m = make_model(seed=0, N=60)
    rep = compute_constants(m)
    bad_g = np.full(m.l, 3.0 * rep.epsbar)
    bad = dataclasses.replace(m, cost=CostCoefficients(
        K=m.cost.K, R11=m.cost.R11, R12=m.cost.R12, R22=m.cost.R22, G=bad_g))
    rep_bad = compute_constants(bad)
    if rep_bad.all_ok:
        # terminal outside the band must trip the certificate
        with pytest.raises(BoundViolation):
            solve_sre(bad)
    else:
        sol = solve_sre(bad)  # advisory mode: flags recorded, no raise
        assert not sol.certified
