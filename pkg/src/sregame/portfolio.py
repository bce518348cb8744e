"""Two-stock competitive portfolio application of the general game machinery.

Two investors trade one stock each plus a shared money market; the game is
played on their wealth gap.  The closed-form feedback theorems for the
unconstrained and no-shorting variants are implemented directly and
cross-checked against the generic solvers, which act as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .engine import FeedbackLaw
from .errors import (BoundViolation, ConditionRequired, DimensionMismatch,
                     SignViolation)
from .model import (CostCoefficients, GameModel, RegimeGenerator,
                    SystemCoefficients, _as_time_table, em1x, full_cone,
                    orthant_cone)
from .sre import SRESolution, TimeGrid, _rk4_backward, default_grid

CONSTRAINT_NONE = "none"
NO_SHORT_1 = "no_short_1"
NO_SHORT_2 = "no_short_2"
NO_SHORT_BOTH = "no_short_both"
_CONSTRAINTS = (CONSTRAINT_NONE, NO_SHORT_1, NO_SHORT_2, NO_SHORT_BOTH)

_CERT_TOL = 1e-8
TERMINAL_WEIGHT = -0.25


class MarketCoeffs(NamedTuple):
    """Market values at one (node, regime) point."""

    r: float
    mu1: float
    mu2: float
    sigma1: np.ndarray
    sigma2: np.ndarray
    R1: float
    R2: float


@dataclass(frozen=True)
class MarketSpec:
    """Regime-switching two-stock market with per-regime coefficient tables."""

    T: float
    N: int
    gen: RegimeGenerator
    r: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    sigma1: np.ndarray   # (nt, l, 2) volatility rows
    sigma2: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    y1: float
    y2: float
    i0: int = 0
    constraint: str = CONSTRAINT_NONE

    def __post_init__(self):
        if self.constraint not in _CONSTRAINTS:
            raise DimensionMismatch(f"unknown constraint regime {self.constraint!r}")
        l = self.gen.l
        for name, tail in (("r", ()), ("mu1", ()), ("mu2", ()),
                           ("sigma1", (2,)), ("sigma2", (2,)),
                           ("R1", ()), ("R2", ())):
            a = _as_time_table(getattr(self, name), tail, name)
            if a.shape[1] != l:
                raise DimensionMismatch(f"{name}: regime count {a.shape[1]} != {l}")
            object.__setattr__(self, name, a)
        if np.any(self.R1 <= 0.0) or np.any(self.R2 <= 0.0):
            raise DimensionMismatch("risk weights R1, R2 must be strictly positive")
        if not (0 <= self.i0 < l):
            raise DimensionMismatch("initial regime out of range")

    @property
    def l(self) -> int:
        return self.gen.l

    @property
    def nt(self) -> int:
        return self.r.shape[0]

    @property
    def x0(self) -> float:
        return float(self.y1 - self.y2)

    def at(self, k: int, i: int) -> MarketCoeffs:
        k = min(k, self.nt - 1)
        return MarketCoeffs(
            r=float(self.r[k, i]), mu1=float(self.mu1[k, i]), mu2=float(self.mu2[k, i]),
            sigma1=self.sigma1[k, i], sigma2=self.sigma2[k, i],
            R1=float(self.R1[k, i]), R2=float(self.R2[k, i]),
        )

    def table_index(self, t: float) -> int:
        if self.nt == 1:
            return 0
        k = int(np.floor(t / (self.T / self.N) + 1e-9))
        return min(max(k, 0), self.nt - 1)


@dataclass(frozen=True)
class MarketConstants:
    """Sup/inf market constants, the derived bound levels, and condition flags."""

    qtilde: float
    rtilde: float
    mutilde: float
    sigbar: float
    sigunder: float
    eps1: float
    eps2: float
    condition1_ok: bool
    condition2_ok: bool
    condition3_ok: bool
    condition4_ok: bool

    @property
    def ok_for_unconstrained(self) -> bool:
        return self.condition1_ok and self.condition2_ok and self.condition3_ok


def market_constants(market: MarketSpec, l: Optional[int] = None,
                     T: Optional[float] = None) -> MarketConstants:
    """Scan the tables for the market constants and the condition flags."""
    l = l if l is not None else market.l
    T = T if T is not None else market.T
    qtilde = float(market.gen.q.max())
    rtilde = float(market.r.max())
    d1 = market.mu1 - market.r
    d2 = market.mu2 - market.r
    mutilde = float(max((d1 ** 2).max(), (d2 ** 2).max()))
    s1 = np.einsum("tln,tln->tl", market.sigma1, market.sigma1)
    s2 = np.einsum("tln,tln->tl", market.sigma2, market.sigma2)
    sigbar = float(max(s1.max(), s2.max()))
    sigunder = float(min(s1.min(), s2.min()))
    x = max(2.0 * rtilde + qtilde, 0.0) * l
    growth = em1x(x * T)           # (e^{xT} - 1)/(xT)
    bracket = T * growth + np.exp(x * T)   # [e^{xT} - 1 + x e^{xT}] / x
    eps2 = float(bracket / 2.0)
    eps1 = float(2.0 * mutilde * T * growth * bracket)
    cross = np.einsum("tln,tln->tl", market.sigma1, market.sigma2)
    rmin = float(min(market.R1.min(), market.R2.min()))
    return MarketConstants(
        qtilde=qtilde, rtilde=rtilde, mutilde=mutilde, sigbar=sigbar,
        sigunder=sigunder, eps1=eps1, eps2=eps2,
        condition1_ok=sigunder > 0.0,
        condition2_ok=rmin > eps1 + sigbar * eps2,
        condition3_ok=2.0 * sigbar < eps1,
        condition4_ok=bool(np.max(np.abs(cross)) <= 1e-12),
    )


def to_game(market: MarketSpec) -> GameModel:
    """Map the market to the general wealth-gap game.

    The state is the wealth difference; its dynamics are homogeneous by
    construction.  The running state cost vanishes, so the bound constant
    for it is floored at the terminal weight to reproduce the market bound
    levels (eps1, eps2) exactly.
    """
    l, nt = market.l, market.nt
    cones = {
        CONSTRAINT_NONE: (full_cone(1), full_cone(1)),
        NO_SHORT_1: (orthant_cone(1), full_cone(1)),
        NO_SHORT_2: (full_cone(1), orthant_cone(1)),
        NO_SHORT_BOTH: (orthant_cone(1), orthant_cone(1)),
    }[market.constraint]
    sys = SystemCoefficients(
        n=2, m1=1, m2=1,
        A=market.r,
        B1=(market.mu1 - market.r)[..., None],
        B2=-(market.mu2 - market.r)[..., None],
        b=np.zeros((nt, l)),
        C=np.zeros((nt, l, 2)),
        D1=market.sigma1[..., None],
        D2=-market.sigma2[..., None],
        sigma=np.zeros((nt, l, 2)),
    )
    cost = CostCoefficients(
        K=np.zeros((nt, l)),
        R11=-market.R1[..., None, None],
        R12=np.zeros((nt, l, 1, 1)),
        R22=market.R2[..., None, None],
        G=np.full(l, TERMINAL_WEIGHT),
    )
    return GameModel(T=market.T, N=market.N, gen=market.gen, sys=sys, cost=cost,
                     x0=market.x0, i0=market.i0, cones=cones,
                     constant_floors={"kbar": abs(TERMINAL_WEIGHT)})


@dataclass(frozen=True)
class PortfolioGreeks:
    """Derived market quantities entering the closed-form laws."""

    phi1: float
    phi2: float
    psi1: float
    psi2: float
    psi3: float
    theta: float
    upsilon: float
    upsilon1: float
    upsilon2: float


def greeks(P: float, lam, mco: MarketCoeffs,
           check_signs: bool = False) -> PortfolioGreeks:
    """Evaluate the market quantities at one (P, Lambda) point.

    With ``check_signs`` the guaranteed sign structure (psi1 < 0 < psi2,
    theta < 0) is enforced and a breach raises ``SignViolation``.
    """
    lam = np.zeros(2) if lam is None else np.asarray(lam, dtype=float)
    phi1 = P * (mco.mu1 - mco.r) + float(mco.sigma1 @ lam)
    phi2 = -P * (mco.mu2 - mco.r) - float(mco.sigma2 @ lam)
    psi1 = P * float(mco.sigma1 @ mco.sigma1) - mco.R1
    psi2 = P * float(mco.sigma2 @ mco.sigma2) + mco.R2
    psi3 = -P * float(mco.sigma1 @ mco.sigma2)
    theta = psi1 * psi2 - psi3 ** 2
    if check_signs and (psi1 >= 0.0 or psi2 <= 0.0 or theta >= 0.0):
        raise SignViolation(
            f"sign structure broken: psi1 = {psi1:.6g}, psi2 = {psi2:.6g}, "
            f"theta = {theta:.6g}")
    upsilon = psi1 * phi2 ** 2 + psi2 * phi1 ** 2 - 2.0 * psi3 * phi1 * phi2
    return PortfolioGreeks(
        phi1=phi1, phi2=phi2, psi1=psi1, psi2=psi2, psi3=psi3, theta=theta,
        upsilon=upsilon,
        upsilon1=psi2 * phi1 - psi3 * phi2,
        upsilon2=psi1 * phi2 - psi3 * phi1,
    )


def _pos(z: float) -> float:
    return max(z, 0.0)


def _neg(z: float) -> float:
    return max(-z, 0.0)


def gtilde(variant: int, P: float, lam, mco: MarketCoeffs) -> float:
    """Generator terms of the constrained wealth-gap equations.

    Variants 1/2 split on the sign of upsilon1 (only player 1 no-short),
    3/4 on upsilon2 (only player 2), 5/6 on phi1/phi2 (both no-short;
    requires uncorrelated stocks, i.e. psi3 = 0).
    """
    g = greeks(P, lam, mco)
    if variant == 1:
        return (-_pos(g.upsilon1) ** 2 - g.theta * g.phi2 ** 2) / (g.theta * g.psi2)
    if variant == 2:
        return (-_neg(g.upsilon1) ** 2 - g.theta * g.phi2 ** 2) / (g.theta * g.psi2)
    if variant == 3:
        return (-_pos(g.upsilon2) ** 2 - g.theta * g.phi1 ** 2) / (g.theta * g.psi1)
    if variant == 4:
        return (-_neg(g.upsilon2) ** 2 - g.theta * g.phi1 ** 2) / (g.theta * g.psi1)
    if variant in (5, 6):
        if abs(g.psi3) > 1e-12 * (1.0 + abs(P)):
            raise ConditionRequired(
                "variants 5/6 need uncorrelated stocks (psi3 = 0)")
        if variant == 5:
            return ((_pos(g.phi1) ** 2 - 2.0 * g.phi1 * _pos(g.phi1)) / g.psi1
                    + (_neg(g.phi2) ** 2 + 2.0 * g.phi2 * _neg(g.phi2)) / g.psi2)
        return ((_neg(g.phi1) ** 2 + 2.0 * g.phi1 * _neg(g.phi1)) / g.psi1
                + (_pos(g.phi2) ** 2 - 2.0 * g.phi2 * _pos(g.phi2)) / g.psi2)
    raise ValueError(f"variant must be 1..6, got {variant}")


def _unconstrained_gen(P: float, lam, mco: MarketCoeffs) -> float:
    g = greeks(P, lam, mco)
    return -g.upsilon / g.theta


_GENERATORS = {
    0: _unconstrained_gen,
    1: lambda P, lam, mco: gtilde(1, P, lam, mco),
    2: lambda P, lam, mco: gtilde(2, P, lam, mco),
    3: lambda P, lam, mco: gtilde(3, P, lam, mco),
    4: lambda P, lam, mco: gtilde(4, P, lam, mco),
    5: lambda P, lam, mco: gtilde(5, P, lam, mco),
    6: lambda P, lam, mco: gtilde(6, P, lam, mco),
}


def solve_wealth_gap_sre(market: MarketSpec, variant: int,
                         grid: Optional[TimeGrid] = None) -> SRESolution:
    """Backward RK4 solve of one wealth-gap equation (variant 0 = unconstrained)."""
    game = to_game(market)
    grid = grid or default_grid(game)
    gen_fn = _GENERATORS[variant]
    q = market.gen.q
    l = market.l

    def rhs(row, P):
        out = np.empty(l)
        for i in range(l):
            mco = market.at(row, i)
            out[i] = 2.0 * P[i] * mco.r + gen_fn(float(P[i]), None, mco)
        return out + q @ P

    P = _rk4_backward(game, grid, rhs, np.full(l, TERMINAL_WEIGHT))
    cons = market_constants(market)
    bound_ok = np.abs(P) <= cons.eps2 + _CERT_TOL
    if cons.ok_for_unconstrained and not bound_ok.all():
        raise BoundViolation(
            f"wealth-gap equation left the certified band |P| <= {cons.eps2:.6g}")
    lam = np.zeros((grid.N + 1, l, 2))
    return SRESolution(grid=grid, P=P, Lam=lam, mode="deterministic",
                       kind=f"wealth_gap_{variant}", bound_ok=bound_ok,
                       envelope_ok=bound_ok, certified=cons.ok_for_unconstrained)


@dataclass(frozen=True)
class PortfolioSolution:
    """Solved wealth-gap fields, closed-form laws and game value."""

    market: MarketSpec
    constants: MarketConstants
    constraint: str
    sres: dict
    law1: FeedbackLaw
    law2: FeedbackLaw
    value: float
    game: GameModel


def _greek_tables(market: MarketSpec, sre: SRESolution):
    """Greeks along one solved field, per (node, regime)."""
    N, l = sre.grid.N, market.l
    names = ("phi1", "phi2", "psi1", "psi2", "psi3", "theta", "upsilon1", "upsilon2")
    tabs = {name: np.zeros((N + 1, l)) for name in names}
    dt = sre.grid.dt
    for k in range(N + 1):
        row = market.table_index(min(k, N - 1) * dt if k < N else market.T)
        for i in range(l):
            g = greeks(float(sre.P[k, i]), None, market.at(row, i))
            for name in names:
                tabs[name][k, i] = getattr(g, name)
    return tabs


def _col(z) -> np.ndarray:
    return np.asarray(z, dtype=float).reshape(-1, 1)


def _portfolio_laws(market: MarketSpec, constraint: str, sres: dict, grid: TimeGrid):
    """Closed-form feedback pairs of the four constraint regimes."""
    if constraint == CONSTRAINT_NONE:
        g = _greek_tables(market, sres["main"])

        def pi1(k, i, x):
            return _col(-g["upsilon1"][k, i] / g["theta"][k, i] * x)

        def beta2(k, i, x, u1):
            return -(g["psi3"][k, i] * u1 + g["phi2"][k, i] * _col(x)) / g["psi2"][k, i]

        def pi2(k, i, x):
            return _col(-g["upsilon2"][k, i] / g["theta"][k, i] * x)

        def beta1(k, i, x, u2):
            return -(g["psi3"][k, i] * u2 + g["phi1"][k, i] * _col(x)) / g["psi1"][k, i]

    elif constraint == NO_SHORT_1:
        ga = _greek_tables(market, sres["pos"])
        gb = _greek_tables(market, sres["neg"])

        def pi1(k, i, x):
            xp, xm = np.maximum(x, 0.0), np.maximum(-x, 0.0)
            return _col(-_pos(ga["upsilon1"][k, i]) / ga["theta"][k, i] * xp
                        - _neg(gb["upsilon1"][k, i]) / gb["theta"][k, i] * xm)

        def beta2(k, i, x, u1):
            xp, xm = _col(np.maximum(x, 0.0)), _col(np.maximum(-x, 0.0))
            ip, im = _col(x > 0.0), _col(x < 0.0)
            return (-(ga["psi3"][k, i] * u1 * ip + ga["phi2"][k, i] * xp) / ga["psi2"][k, i]
                    - (gb["psi3"][k, i] * u1 * im - gb["phi2"][k, i] * xm) / gb["psi2"][k, i])

        def pi2(k, i, x):
            xp, xm = np.maximum(x, 0.0), np.maximum(-x, 0.0)
            a = ((ga["psi3"][k, i] * _pos(ga["upsilon1"][k, i])
                  - ga["phi2"][k, i] * ga["theta"][k, i])
                 / (ga["psi2"][k, i] * ga["theta"][k, i]))
            b = ((gb["psi3"][k, i] * _neg(gb["upsilon1"][k, i])
                  + gb["phi2"][k, i] * gb["theta"][k, i])
                 / (gb["psi2"][k, i] * gb["theta"][k, i]))
            return _col(a * xp + b * xm)

        def beta1(k, i, x, u2):
            xp, xm = _col(np.maximum(x, 0.0)), _col(np.maximum(-x, 0.0))
            ip, im = _col(x > 0.0), _col(x < 0.0)
            inner_p = ga["psi3"][k, i] * u2 * ip + ga["phi1"][k, i] * xp
            inner_m = gb["psi3"][k, i] * u2 * im - gb["phi1"][k, i] * xm
            return (-np.maximum(inner_p, 0.0) / ga["psi1"][k, i]
                    - np.maximum(inner_m, 0.0) / gb["psi1"][k, i])

    elif constraint == NO_SHORT_2:
        ga = _greek_tables(market, sres["pos"])
        gb = _greek_tables(market, sres["neg"])

        def pi1(k, i, x):
            xp, xm = np.maximum(x, 0.0), np.maximum(-x, 0.0)
            a = ((ga["psi3"][k, i] * _pos(ga["upsilon2"][k, i])
                  - ga["phi1"][k, i] * ga["theta"][k, i])
                 / (ga["psi1"][k, i] * ga["theta"][k, i]))
            b = ((gb["psi3"][k, i] * _neg(gb["upsilon2"][k, i])
                  + gb["phi1"][k, i] * gb["theta"][k, i])
                 / (gb["psi1"][k, i] * gb["theta"][k, i]))
            return _col(a * xp + b * xm)

        def beta2(k, i, x, u1):
            xp, xm = _col(np.maximum(x, 0.0)), _col(np.maximum(-x, 0.0))
            ip, im = _col(x > 0.0), _col(x < 0.0)
            inner_p = ga["psi3"][k, i] * u1 * ip + ga["phi2"][k, i] * xp
            inner_m = gb["psi3"][k, i] * u1 * im - gb["phi2"][k, i] * xm
            return (np.maximum(-inner_p, 0.0) / ga["psi2"][k, i]
                    + np.maximum(-inner_m, 0.0) / gb["psi2"][k, i])

        def pi2(k, i, x):
            xp, xm = np.maximum(x, 0.0), np.maximum(-x, 0.0)
            return _col(-_pos(ga["upsilon2"][k, i]) / ga["theta"][k, i] * xp
                        - _neg(gb["upsilon2"][k, i]) / gb["theta"][k, i] * xm)

        def beta1(k, i, x, u2):
            xp, xm = _col(np.maximum(x, 0.0)), _col(np.maximum(-x, 0.0))
            ip, im = _col(x > 0.0), _col(x < 0.0)
            return (-(ga["psi3"][k, i] * u2 * ip + ga["phi1"][k, i] * xp) / ga["psi1"][k, i]
                    - (gb["psi3"][k, i] * u2 * im - gb["phi1"][k, i] * xm) / gb["psi1"][k, i])

    else:  # NO_SHORT_BOTH, psi3 = 0
        ga = _greek_tables(market, sres["pos"])
        gb = _greek_tables(market, sres["neg"])

        def pi1(k, i, x):
            xp, xm = np.maximum(x, 0.0), np.maximum(-x, 0.0)
            return _col(_pos(ga["phi1"][k, i]) / (-ga["psi1"][k, i]) * xp
                        + _neg(gb["phi1"][k, i]) / (-gb["psi1"][k, i]) * xm)

        def pi2(k, i, x):
            xp, xm = np.maximum(x, 0.0), np.maximum(-x, 0.0)
            return _col(_neg(ga["phi2"][k, i]) / ga["psi2"][k, i] * xp
                        + _pos(gb["phi2"][k, i]) / gb["psi2"][k, i] * xm)

        def beta2(k, i, x, u1):
            return pi2(k, i, x)

        def beta1(k, i, x, u2):
            return pi1(k, i, x)

    law1 = FeedbackLaw(kind=f"portfolio_{constraint}_p1", grid=grid,
                       control_player=1, strategy_player=2,
                       control=pi1, strategy=beta2)
    law2 = FeedbackLaw(kind=f"portfolio_{constraint}_p2", grid=grid,
                       control_player=2, strategy_player=1,
                       control=pi2, strategy=beta1)
    return law1, law2


def solve_portfolio(market: MarketSpec, grid: Optional[TimeGrid] = None) -> PortfolioSolution:
    """Solve the wealth-gap game for the market's constraint regime.

    Returns the solved field(s), the closed-form feedback pair of the
    matching theorem, and the exact value at the initial wealth gap.
    """
    cons = market_constants(market)
    game = to_game(market)
    grid = grid or default_grid(game)
    x = market.x0
    xp, xm = max(x, 0.0), max(-x, 0.0)
    variants = {
        CONSTRAINT_NONE: (0, 0),
        NO_SHORT_1: (1, 2),
        NO_SHORT_2: (3, 4),
        NO_SHORT_BOTH: (5, 6),
    }[market.constraint]
    if market.constraint == NO_SHORT_BOTH and not cons.condition4_ok:
        raise ConditionRequired(
            "the double no-shorting regime needs uncorrelated stocks (condition 4)")
    if market.constraint == CONSTRAINT_NONE:
        main = solve_wealth_gap_sre(market, 0, grid)
        sres = {"main": main}
        value = float(main.P[0, market.i0] * x ** 2)
    else:
        pos = solve_wealth_gap_sre(market, variants[0], grid)
        neg = solve_wealth_gap_sre(market, variants[1], grid)
        sres = {"pos": pos, "neg": neg}
        value = float(pos.P[0, market.i0] * xp ** 2 + neg.P[0, market.i0] * xm ** 2)
    law1, law2 = _portfolio_laws(market, market.constraint, sres, grid)
    return PortfolioSolution(market=market, constants=cons,
                             constraint=market.constraint, sres=sres,
                             law1=law1, law2=law2, value=value, game=game)
