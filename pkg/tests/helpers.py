"""Shared scenario factories for the test suite.

``make_model`` draws a random game instance and rescales the cost block so
every standing assumption holds with explicit margin; dimensions must
satisfy m_k <= n or the uniform-ellipticity assumption cannot hold.
"""

import numpy as np

from sregame import (CostCoefficients, GameModel, MarketSpec, RegimeGenerator,
                     SystemCoefficients, compute_constants, full_cone)
from sregame.model import MODE_FACTOR
from sregame.portfolio import CONSTRAINT_NONE


def rand_psd(rng, m, scale):
    w = rng.normal(size=(m, m))
    w = w @ w.T
    top = np.linalg.eigvalsh(w).max()
    return w * (scale / top) if top > 0 else np.zeros((m, m))


def make_model(seed=0, l=2, n=1, m1=1, m2=1, T=1.0, N=400, homogeneous=False,
               cones=None, x0=1.0, coef_scale=0.25, time_varying=False,
               margin_frac=0.15, q_scale=1.0, x0_regime=0):
    """Random game instance passing all standing assumptions."""
    assert m1 <= n and m2 <= n, "uniform ellipticity needs m_k <= n"
    rng = np.random.default_rng(seed)
    nt = N + 1 if time_varying else 1

    def tab(*tail, lo=-1.0, hi=1.0):
        return coef_scale * rng.uniform(lo, hi, size=(nt, l) + tail)

    q = rng.uniform(0.2, 1.2, size=(l, l)) * q_scale
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    gen = RegimeGenerator(q)

    eye1 = np.broadcast_to(np.eye(n, m1), (nt, l, n, m1))
    eye2 = np.broadcast_to(np.eye(n, m2), (nt, l, n, m2))
    sys_co = SystemCoefficients(
        n=n, m1=m1, m2=m2,
        A=tab(), B1=tab(m1), B2=tab(m2),
        b=np.zeros((nt, l)) if homogeneous else tab(),
        C=tab(n),
        D1=eye1 + 0.3 * coef_scale * rng.uniform(-1, 1, size=(nt, l, n, m1)),
        D2=eye2 + 0.3 * coef_scale * rng.uniform(-1, 1, size=(nt, l, n, m2)),
        sigma=np.zeros((nt, l, n)) if homogeneous else tab(n),
    )
    K = rng.uniform(-0.3, 0.4, size=(nt, l))
    G = rng.uniform(-0.35, 0.45, size=l)

    placeholder = CostCoefficients(
        K=K, R11=np.broadcast_to(-np.eye(m1), (nt, l, m1, m1)).copy(),
        R12=np.zeros((nt, l, m1, m2)),
        R22=np.broadcast_to(np.eye(m2), (nt, l, m2, m2)).copy(), G=G)
    probe = GameModel(T=T, N=N, gen=gen, sys=sys_co, cost=placeholder,
                      x0=x0, i0=x0_regime)
    rep = compute_constants(probe)
    if rep.epsilon <= 2.0 * rep.cbar2:
        factor = 2.5 * rep.cbar2 / max(rep.epsilon, 1e-12)
        K = K * factor
        G = G * factor
        placeholder = CostCoefficients(
            K=K, R11=placeholder.R11, R12=placeholder.R12, R22=placeholder.R22, G=G)
        probe = GameModel(T=T, N=N, gen=gen, sys=sys_co, cost=placeholder,
                          x0=x0, i0=x0_regime)
        rep = compute_constants(probe)

    level = (rep.epsilon + rep.epsbar * rep.cbar2) * (1.0 + margin_frac)
    R11 = np.empty((nt, l, m1, m1))
    R22 = np.empty((nt, l, m2, m2))
    R12 = rng.uniform(-0.15, 0.15, size=(nt, l, m1, m2)) * level
    for t in range(nt):
        for i in range(l):
            R11[t, i] = -level * np.eye(m1) - rand_psd(rng, m1, 0.2 * level)
            R22[t, i] = level * np.eye(m2) + rand_psd(rng, m2, 0.2 * level)
    cost_co = CostCoefficients(K=K, R11=R11, R12=R12, R22=R22, G=G)
    model = GameModel(T=T, N=N, gen=gen, sys=sys_co, cost=cost_co,
                      x0=x0, i0=x0_regime, cones=cones)
    return model


def make_factor_model(seed=0, **kwargs):
    """Constant-coefficient model re-expressed through a trivial factor map."""
    import dataclasses

    base = make_model(seed=seed, **kwargs)

    def factor_fn(t, i, y):
        return {}

    sys_f = dataclasses.replace(base.sys, mode=MODE_FACTOR, factor_fn=factor_fn)
    return base, dataclasses.replace(base, sys=sys_f)


def make_market(seed=0, l=2, T=1.0, N=300, constraint=CONSTRAINT_NONE,
                uncorrelated=False, y1=1.3, y2=1.0, i0=0):
    """Random market instance passing the wealth-gap game conditions."""
    rng = np.random.default_rng(seed)
    q = rng.uniform(0.3, 0.9, size=(l, l))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    gen = RegimeGenerator(q)
    r = rng.uniform(0.01, 0.03, size=(1, l))
    mu1 = r + rng.uniform(0.02, 0.12, size=(1, l)) * rng.choice([-1, 1], size=(1, l))
    mu2 = r + rng.uniform(0.02, 0.12, size=(1, l)) * rng.choice([-1, 1], size=(1, l))
    if uncorrelated:
        sigma1 = np.stack([rng.uniform(0.15, 0.35, size=(1, l)),
                           np.zeros((1, l))], axis=-1)
        sigma2 = np.stack([np.zeros((1, l)),
                           rng.uniform(0.15, 0.35, size=(1, l))], axis=-1)
    else:
        sigma1 = rng.uniform(0.1, 0.3, size=(1, l, 2))
        sigma2 = rng.uniform(0.1, 0.3, size=(1, l, 2))
    s2max = max(np.einsum("tln,tln->tl", sigma1, sigma1).max(),
                np.einsum("tln,tln->tl", sigma2, sigma2).max())
    base = 1.0  # risk weights set from the bound levels below
    market = MarketSpec(T=T, N=N, gen=gen, r=r, mu1=mu1, mu2=mu2,
                        sigma1=sigma1, sigma2=sigma2,
                        R1=np.full((1, l), base), R2=np.full((1, l), base),
                        y1=y1, y2=y2, i0=i0, constraint=constraint)
    from sregame import market_constants
    cons = market_constants(market)
    lvl = 1.3 * (cons.eps1 + cons.sigbar * cons.eps2) + 0.5
    R1 = lvl * rng.uniform(1.0, 1.4, size=(1, l))
    R2 = lvl * rng.uniform(1.0, 1.4, size=(1, l))
    return MarketSpec(T=T, N=N, gen=gen, r=r, mu1=mu1, mu2=mu2,
                      sigma1=sigma1, sigma2=sigma2, R1=R1, R2=R2,
                      y1=y1, y2=y2, i0=i0, constraint=constraint)


def steep_truncation_model(T=0.3, N=120):
    """Short horizon, asymmetric diffusion loadings: the Lipschitz envelope
    strictly exceeds the Hamiltonian at small k."""
    l = 2
    gen = RegimeGenerator(np.array([[-0.6, 0.6], [0.4, -0.4]]))
    nt = 1
    sys_co = SystemCoefficients(
        n=1, m1=1, m2=1,
        A=np.full((nt, l), 0.1), B1=np.zeros((nt, l, 1)),
        B2=np.full((nt, l, 1), 0.5), b=np.zeros((nt, l)),
        C=np.zeros((nt, l, 1)), D1=np.full((nt, l, 1, 1), 1.0),
        D2=np.full((nt, l, 1, 1), 0.3), sigma=np.zeros((nt, l, 1)))
    K = np.full((nt, l), 3.0)
    G = np.array([1.0, 0.8])
    cost0 = CostCoefficients(K=K, R11=np.full((nt, l, 1, 1), -1.0),
                             R12=np.zeros((nt, l, 1, 1)),
                             R22=np.full((nt, l, 1, 1), 1.0), G=G)
    probe = GameModel(T=T, N=N, gen=gen, sys=sys_co, cost=cost0, x0=1.0, i0=0)
    rep = compute_constants(probe)
    level = (rep.epsilon + rep.epsbar * rep.cbar2) * 1.12
    cost = CostCoefficients(K=K, R11=np.full((nt, l, 1, 1), -level),
                            R12=np.zeros((nt, l, 1, 1)),
                            R22=np.full((nt, l, 1, 1), level), G=G)
    return GameModel(T=T, N=N, gen=gen, sys=sys_co, cost=cost, x0=1.0, i0=0)


def mirror_model(model):
    """Player swap with cost negation: the zero-sum dual of the game."""
    s, c = model.sys, model.cost
    sys_m = SystemCoefficients(
        n=s.n, m1=s.m2, m2=s.m1, A=s.A, B1=s.B2, B2=s.B1, b=s.b, C=s.C,
        D1=s.D2, D2=s.D1, sigma=s.sigma)
    cost_m = CostCoefficients(K=-c.K, R11=-c.R22,
                              R12=-np.swapaxes(c.R12, -1, -2),
                              R22=-c.R11, G=-c.G)
    return GameModel(T=model.T, N=model.N, gen=model.gen, sys=sys_m,
                     cost=cost_m, x0=model.x0, i0=model.i0,
                     cones=(model.cones[1], model.cones[0]))


def degenerate_scalar_model(a=0.4, k0=0.3, G=0.25, T=1.0, N=2000):
    """Single regime, B = C = 0: the Riccati field has a closed form."""
    gen = RegimeGenerator(np.array([[0.0]]))
    sys_co = SystemCoefficients(
        n=1, m1=1, m2=1,
        A=np.full((1, 1), a), B1=np.zeros((1, 1, 1)), B2=np.zeros((1, 1, 1)),
        b=np.zeros((1, 1)), C=np.zeros((1, 1, 1)),
        D1=np.ones((1, 1, 1, 1)), D2=np.ones((1, 1, 1, 1)),
        sigma=np.zeros((1, 1, 1)))
    cost = CostCoefficients(
        K=np.full((1, 1), k0), R11=np.full((1, 1, 1, 1), -5.0),
        R12=np.zeros((1, 1, 1, 1)), R22=np.full((1, 1, 1, 1), 5.0),
        G=np.array([G]))
    return GameModel(T=T, N=N, gen=gen, sys=sys_co, cost=cost, x0=1.0, i0=0)


def scalar_exact_solution(t, a, k0, G, T):
    return (G + k0 / (2.0 * a)) * np.exp(2.0 * a * (T - t)) - k0 / (2.0 * a)
