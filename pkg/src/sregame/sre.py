"""Backward solvers for the Riccati field, its constrained pair, and the
companion linear equation.

Deterministic-coefficient models reduce to coupled terminal-value ODE systems
(one component per regime) integrated with classical RK4 and coefficients
frozen per step.  A priori bounds are certified, never enforced: violations
under passing assumptions raise instead of being clipped.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import hamiltonian as ham
from .errors import (BoundViolation, DegenerateConstants, GridMismatch,
                     RegressionIllConditioned, StepRejected)
from .model import (MODE_DETERMINISTIC, MODE_FACTOR, AssumptionReport,
                    GameModel, compute_constants, em1x)

_CERT_TOL = 1e-8


@dataclass(frozen=True)
class TimeGrid:
    """Uniform solver grid t_0 = 0 < ... < t_N = T."""

    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0.0) or self.N < 2:
            raise GridMismatch("grid needs T > 0 and N >= 2")

    @property
    def dt(self) -> float:
        return self.T / self.N

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)


def default_grid(model: GameModel) -> TimeGrid:
    return TimeGrid(model.T, model.N)


def _require_same_grid(a: TimeGrid, b: TimeGrid):
    if a.N != b.N or abs(a.T - b.T) > 1e-12 * max(1.0, a.T):
        raise GridMismatch(f"grids differ: ({a.T}, {a.N}) vs ({b.T}, {b.N})")


@dataclass(frozen=True)
class SRESolution:
    """Time-gridded Riccati field per regime with bound certificates."""

    grid: TimeGrid
    P: np.ndarray        # (N+1, l)
    Lam: np.ndarray      # (N+1, l, n); identically zero in deterministic mode
    mode: str
    kind: str            # "unconstrained" | "constrained_pos" | "constrained_neg"
    bound_ok: np.ndarray      # (N+1, l): |P| <= epsbar
    envelope_ok: np.ndarray   # (N+1, l): within the comparison envelope
    certified: bool           # assumptions held, so the flags are guarantees

    def value_at_start(self, i: int) -> float:
        return float(self.P[0, i])


@dataclass(frozen=True)
class PhiSolution:
    """Solution of the companion linear terminal-value equation."""

    grid: TimeGrid
    phi: np.ndarray      # (N+1, l)
    Delta: np.ndarray    # (N+1, l, n); zero in deterministic mode


@dataclass(frozen=True)
class ComparisonEnvelope:
    """Closed-form bounding functions from the existence argument."""

    c1: float
    l: int
    T: float
    kbar: float
    gbar: float
    epsbar: float

    def pbar(self, t):
        t = np.asarray(t, dtype=float)
        x = self.c1 * self.l
        tau = self.T - t
        coef = self.kbar + self.epsbar / (2.0 * self.T * em1x(x * self.T))
        return self.gbar * np.exp(x * tau) + coef * tau * _em1x_arr(x * tau)

    def punder(self, t):
        return -self.pbar(t)


def _em1x_arr(y):
    y = np.asarray(y, dtype=float)
    small = np.abs(y) < 1e-8
    safe = np.where(small, 1.0, y)
    return np.where(small, 1.0 + y / 2.0 + y * y / 6.0, np.expm1(safe) / safe)


def comparison_envelope(model: GameModel,
                        constants: Optional[AssumptionReport] = None) -> ComparisonEnvelope:
    """Closed-form upper/lower bounding functions for the Riccati field."""
    rep = constants if constants is not None else compute_constants(model)
    vals = (rep.c1, rep.kbar, rep.gbar, rep.epsbar)
    if not all(np.isfinite(v) for v in vals):
        raise DegenerateConstants(f"non-finite constants {vals}")
    return ComparisonEnvelope(c1=rep.c1, l=rep.l, T=rep.horizon,
                              kbar=rep.kbar, gbar=rep.gbar, epsbar=rep.epsbar)


class _Tables:
    """Coefficient tables stacked for fast per-step evaluation."""

    def __init__(self, model: GameModel):
        s, c = model.sys, model.cost
        nt = max(s.nt, c.nt)

        def up(a):
            return np.broadcast_to(a, (nt,) + a.shape[1:])

        self.A = up(s.A)
        self.two_a_cc = up(2.0 * s.A + np.einsum("tln,tln->tl", s.C, s.C))
        self.K = up(c.K)
        D = np.concatenate([s.D1, s.D2], axis=3)
        m1 = s.m1
        m = m1 + s.m2
        R = np.zeros(c.R11.shape[:2] + (m, m))
        R[..., :m1, :m1] = c.R11
        R[..., :m1, m1:] = c.R12
        R[..., m1:, :m1] = np.swapaxes(c.R12, -1, -2)
        R[..., m1:, m1:] = c.R22
        self.R = up(R)
        self.DtD = up(np.einsum("tlnm,tlnk->tlmk", D, D))
        B = np.concatenate([s.B1, s.B2], axis=2)
        self.B = up(B)
        self.E = up(B + np.einsum("tlnm,tln->tlm", D, s.C))
        self.Dsig = up(np.einsum("tlnm,tln->tlm", D, s.sigma))
        self.b_csig = up(s.b + np.einsum("tln,tln->tl", s.C, s.sigma))
        self.b = up(s.b)
        self.sig2 = up(np.einsum("tln,tln->tl", s.sigma, s.sigma))
        self.nt = nt


def _h1_vec(tab: _Tables, row: int, P: np.ndarray) -> np.ndarray:
    """H1(t, i, P_i, 0) for all regimes at once (deterministic branch)."""
    rhat = tab.R[row] + P[:, None, None] * tab.DtD[row]
    chat = P[:, None] * tab.E[row]
    sol = np.linalg.solve(rhat, chat[..., None])[..., 0]
    return -np.einsum("lm,lm->l", chat, sol)


def _sre_rhs(model: GameModel, tab: _Tables, row: int, P: np.ndarray) -> np.ndarray:
    return (tab.K[row] + P * tab.two_a_cc[row] + _h1_vec(tab, row, P)
            + model.gen.q @ P)


def _rk4_backward(model: GameModel, grid: TimeGrid, rhs, terminal: np.ndarray) -> np.ndarray:
    """Integrate dY/dt = -rhs(row, Y) from Y(T) = terminal down to t = 0."""
    dt = grid.dt

    def stage(row, y, k):
        if not np.all(np.isfinite(y)):
            raise StepRejected(f"non-finite stage state at node {k}")
        try:
            d = rhs(row, y)
        except np.linalg.LinAlgError as exc:
            raise StepRejected(f"singular stage system at node {k}") from exc
        if not np.all(np.isfinite(d)):
            raise StepRejected(f"non-finite stage derivative at node {k}")
        return d

    out = np.empty((grid.N + 1,) + terminal.shape)
    out[grid.N] = terminal
    y = terminal
    for k in range(grid.N - 1, -1, -1):
        row = model.table_index(k * dt)
        k1 = stage(row, y, k)
        k2 = stage(row, y + 0.5 * dt * k1, k)
        k3 = stage(row, y + 0.5 * dt * k2, k)
        k4 = stage(row, y + dt * k3, k)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
    return out


def _certify(model: GameModel, grid: TimeGrid, P: np.ndarray,
             constants: AssumptionReport, what: str):
    env = comparison_envelope(model, constants)
    t = grid.nodes()
    pb = env.pbar(t)[:, None]
    bound_ok = np.abs(P) <= constants.epsbar + _CERT_TOL
    envelope_ok = (P >= -pb - _CERT_TOL) & (P <= pb + _CERT_TOL)
    if constants.all_ok and not (bound_ok.all() and envelope_ok.all()):
        worst = float(np.abs(P).max())
        raise BoundViolation(
            f"{what}: certified bounds violated under passing assumptions "
            f"(max |P| = {worst:.6g}, epsbar = {constants.epsbar:.6g})")
    return bound_ok, envelope_ok


def solve_sre(model: GameModel, grid: Optional[TimeGrid] = None,
              constants: Optional[AssumptionReport] = None) -> SRESolution:
    """Solve the unconstrained Riccati system backward on the grid.

    Deterministic-coefficient branch: the martingale part vanishes and the
    system is the coupled ODE field with generator K + P(2A + C'C) + H1 plus
    the regime-coupling term.
    """
    if model.sys.mode != MODE_DETERMINISTIC:
        raise ValueError("solve_sre requires deterministic coefficients; "
                         "use solve_sre_random for factor-driven models")
    grid = grid or default_grid(model)
    if abs(grid.T - model.T) > 1e-12 * max(1.0, model.T):
        raise GridMismatch("grid horizon differs from the model horizon")
    rep = constants if constants is not None else compute_constants(model)
    tab = _Tables(model)
    P = _rk4_backward(model, grid, lambda row, y: _sre_rhs(model, tab, row, y),
                      model.cost.G.copy())
    bound_ok, envelope_ok = _certify(model, grid, P, rep, "solve_sre")
    lam = np.zeros((grid.N + 1, model.l, model.sys.n))
    return SRESolution(grid=grid, P=P, Lam=lam, mode=MODE_DETERMINISTIC,
                       kind="unconstrained", bound_ok=bound_ok,
                       envelope_ok=envelope_ok, certified=rep.all_ok)


def solve_sre_constrained(model: GameModel, grid: Optional[TimeGrid] = None,
                          constants: Optional[AssumptionReport] = None):
    """Solve the cone-constrained Riccati pair (positive/negative branches)."""
    if model.sys.mode != MODE_DETERMINISTIC:
        raise ValueError("solve_sre_constrained requires deterministic coefficients")
    if not model.is_homogeneous:
        raise ValueError("the constrained game requires homogeneous dynamics")
    grid = grid or default_grid(model)
    if abs(grid.T - model.T) > 1e-12 * max(1.0, model.T):
        raise GridMismatch("grid horizon differs from the model horizon")
    rep = constants if constants is not None else compute_constants(model)
    tab = _Tables(model)
    cones = model.cones

    def htilde(row, P, which):
        out = np.empty(model.l)
        for i in range(model.l):
            pair = ham.htilde_pair(float(P[i]), None, cones, model.coeffs_at(row, i))
            out[i] = pair[which]
        return out

    sols = []
    for which, kind in ((0, "constrained_pos"), (1, "constrained_neg")):

        def rhs(row, P, which=which):
            return (tab.K[row] + P * tab.two_a_cc[row] + htilde(row, P, which)
                    + model.gen.q @ P)

        P = _rk4_backward(model, grid, rhs, model.cost.G.copy())
        bound_ok, envelope_ok = _certify(model, grid, P, rep, f"solve_sre_constrained[{kind}]")
        lam = np.zeros((grid.N + 1, model.l, model.sys.n))
        sols.append(SRESolution(grid=grid, P=P, Lam=lam, mode=MODE_DETERMINISTIC,
                                kind=kind, bound_ok=bound_ok,
                                envelope_ok=envelope_ok, certified=rep.all_ok))
    return sols[0], sols[1]


def solve_linear_bsde(model: GameModel, sre: SRESolution,
                      grid: Optional[TimeGrid] = None) -> PhiSolution:
    """Solve the companion linear equation for the affine value term.

    The Riccati field is re-integrated jointly so the stages see consistent
    values; the node values must match the supplied solution.
    """
    if model.sys.mode != MODE_DETERMINISTIC:
        raise ValueError("solve_linear_bsde requires deterministic coefficients")
    grid = grid or sre.grid
    _require_same_grid(grid, sre.grid)
    tab = _Tables(model)

    def rhs(row, y):
        P, phi = y
        dP = _sre_rhs(model, tab, row, P)
        rhat = tab.R[row] + P[:, None, None] * tab.DtD[row]
        chat = P[:, None] * tab.E[row]
        sighat = phi[:, None] * tab.B[row] + P[:, None] * tab.Dsig[row]
        h2 = -np.einsum("lm,lm->l", chat,
                        np.linalg.solve(rhat, sighat[..., None])[..., 0])
        dphi = (P * tab.b_csig[row] + tab.A[row] * phi + h2 + model.gen.q @ phi)
        return np.stack([dP, dphi])

    terminal = np.stack([model.cost.G.copy(), np.zeros(model.l)])
    out = _rk4_backward(model, grid, rhs, terminal)
    P_check = out[:, 0, :]
    scale = 1.0 + float(np.abs(sre.P).max())
    if float(np.abs(P_check - sre.P).max()) > 1e-9 * scale:
        raise GridMismatch("supplied Riccati solution is inconsistent with this model/grid")
    return PhiSolution(grid=grid, phi=out[:, 1, :],
                       Delta=np.zeros((grid.N + 1, model.l, model.sys.n)))


def monotone_truncated_sequence(model: GameModel, grid: Optional[TimeGrid],
                                ks, constants: Optional[AssumptionReport] = None,
                                mono_tol: float = 1e-8):
    """Solve the Lipschitz-truncated family for each k and certify ordering.

    Returns one solution per k.  The iterates must stay inside the
    comparison envelope and be pointwise nonincreasing in k.
    """
    ks = list(ks)
    if any(k2 <= k1 for k1, k2 in zip(ks, ks[1:])) or any(k < 1 for k in ks):
        raise ValueError("ks must be strictly increasing integers >= 1")
    if model.sys.mode != MODE_DETERMINISTIC:
        raise ValueError("monotone_truncated_sequence requires deterministic coefficients")
    grid = grid or default_grid(model)
    rep = constants if constants is not None else compute_constants(model)
    tab = _Tables(model)
    sols = []
    for k in ks:

        def rhs(row, P, k=k):
            h = np.empty(model.l)
            for i in range(model.l):
                h[i] = ham.h1_truncated(k, float(P[i]), None,
                                        model.coeffs_at(row, i), rep)
            return tab.K[row] + P * tab.two_a_cc[row] + h + model.gen.q @ P

        P = _rk4_backward(model, grid, rhs, model.cost.G.copy())
        bound_ok, envelope_ok = _certify(model, grid, P, rep,
                                         f"monotone_truncated_sequence[k={k}]")
        lam = np.zeros((grid.N + 1, model.l, model.sys.n))
        sols.append(SRESolution(grid=grid, P=P, Lam=lam, mode=MODE_DETERMINISTIC,
                                kind=f"truncated_k{k}", bound_ok=bound_ok,
                                envelope_ok=envelope_ok, certified=rep.all_ok))
    for lo, hi in zip(sols, sols[1:]):
        if np.any(hi.P > lo.P + mono_tol):
            worst = float((hi.P - lo.P).max())
            raise BoundViolation(
                f"truncated family not monotone in k (max increase {worst:.3e})")
    return sols


@dataclass(frozen=True)
class RandomSRESolution:
    """Least-squares Monte Carlo solution of the random-coefficient equation."""

    grid: TimeGrid
    P: np.ndarray            # (N+1, l) path means
    Lam: np.ndarray          # (N+1, l, n) path means (terminal row zero)
    P_paths: np.ndarray      # (M, N+1, l)
    Lam_paths: np.ndarray    # (M, N, l, n)
    bound_ok: np.ndarray     # (M, N+1, l)
    violation_fraction: float
    step_residuals: np.ndarray  # (N,) mean absolute one-step closure error
    mode: str = MODE_FACTOR
    kind: str = "unconstrained"


def _poly_basis(y: np.ndarray, degree: int):
    """Standardized polynomial features of the factor state, degenerate
    columns dropped."""
    m, n = y.shape
    cols = [np.ones(m)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), deg):
            col = np.ones(m)
            for j in combo:
                col = col * y[:, j]
            cols.append(col)
    phi = np.stack(cols, axis=1)
    mean = phi.mean(axis=0)
    std = phi.std(axis=0)
    keep = [0]
    for j in range(1, phi.shape[1]):
        if std[j] > 1e-12 * (1.0 + abs(mean[j])):
            keep.append(j)
    out = phi[:, keep].copy()
    out[:, 1:] = (out[:, 1:] - mean[keep[1:]]) / std[keep[1:]]
    return out


def _regress(phi: np.ndarray, target: np.ndarray) -> np.ndarray:
    gram = phi.T @ phi
    if np.linalg.cond(gram) > 1e12:
        raise RegressionIllConditioned(
            f"normal matrix condition {np.linalg.cond(gram):.3e} exceeds 1e12")
    coef = np.linalg.solve(gram, phi.T @ target)
    return phi @ coef


def _factor_coeffs(model: GameModel, row: int, i: int, t: float, y: np.ndarray):
    """Stacked per-path (R, DtD, E, two_a_cc, K) arrays at one (t, i)."""
    co = model.coeffs_at(row, i)
    over = model.sys.factor_fn(t, i, y) or {}
    m = y.shape[0]

    def get(name, base):
        v = over.get(name)
        if v is None:
            return np.broadcast_to(np.asarray(base, dtype=float), (m,) + np.shape(base))
        v = np.asarray(v, dtype=float)
        if v.shape[:1] != (m,):
            v = np.broadcast_to(v, (m,) + v.shape)
        return v

    A = get("A", co.A)
    B1 = get("B1", co.B1)
    B2 = get("B2", co.B2)
    C = get("C", co.C)
    D1 = get("D1", co.D1)
    D2 = get("D2", co.D2)
    K = get("K", co.K)
    R11 = get("R11", co.R11)
    R12 = get("R12", co.R12)
    R22 = get("R22", co.R22)
    m1, m2 = model.sys.m1, model.sys.m2
    mm = m1 + m2
    R = np.zeros((m, mm, mm))
    R[:, :m1, :m1] = R11
    R[:, :m1, m1:] = R12
    R[:, m1:, :m1] = np.swapaxes(R12, -1, -2)
    R[:, m1:, m1:] = R22
    D = np.concatenate([D1, D2], axis=2)
    DtD = np.einsum("bnm,bnk->bmk", D, D)
    E = np.concatenate([B1, B2], axis=1) + np.einsum("bnm,bn->bm", D, C)
    two_a_cc = 2.0 * A + np.einsum("bn,bn->b", C, C)
    return R, DtD, E, D, C, two_a_cc, K


def solve_sre_random(model: GameModel, grid: TimeGrid, paths, basis_degree: int,
                     constants: Optional[AssumptionReport] = None) -> RandomSRESolution:
    """Backward least-squares Monte Carlo solve for factor-driven coefficients.

    Conditional expectations are regressed on polynomial features of the
    factor state per regime; the martingale integrand comes from the
    increment regression.  A Heun corrector keeps the time bias second
    order.  Research-grade: diagnostics, not certificates.
    """
    if model.sys.mode != MODE_FACTOR:
        raise ValueError("solve_sre_random requires a factor-driven model")
    _require_same_grid(grid, paths.grid)
    rep = constants if constants is not None else compute_constants(model)
    M = paths.M
    N, l, n = grid.N, model.l, model.sys.n
    dt = grid.dt
    W = paths.w_nodes()
    q = model.gen.q

    P_paths = np.empty((M, N + 1, l))
    Lam_paths = np.zeros((M, N, l, n))
    P_paths[:, N, :] = model.cost.G[None, :]
    residuals = np.zeros(N)

    for k in range(N - 1, -1, -1):
        t = k * dt
        row = model.table_index(t)
        phi = _poly_basis(W[:, k, :], basis_degree)
        dw = paths.dw(k)
        p_next = P_paths[:, k + 1, :]
        e_next = np.empty((M, l))
        lam_k = np.empty((M, l, n))
        for i in range(l):
            e_next[:, i] = _regress(phi, p_next[:, i])
            for j in range(n):
                lam_k[:, i, j] = _regress(phi, p_next[:, i] * dw[:, j] / dt)
        Lam_paths[:, k, :, :] = lam_k

        p_k = np.empty((M, l))
        coupling = e_next @ q.T
        for i in range(l):
            R, DtD, E, D, C, two_a_cc, K = _factor_coeffs(model, row, i, t, W[:, k, :])
            lam_i = lam_k[:, i, :]
            c_lam = 2.0 * np.einsum("bn,bn->b", C, lam_i)

            def gen_f(p):
                h1 = _h1_paths(p, lam_i, R, DtD, E, D)
                return K + p * two_a_cc + c_lam + h1 + coupling[:, i]

            f1 = gen_f(e_next[:, i])
            pred = e_next[:, i] + dt * f1
            f2 = gen_f(pred)
            p_k[:, i] = e_next[:, i] + 0.5 * dt * (f1 + f2)
            residuals[k] += float(np.mean(np.abs(
                p_next[:, i] - p_k[:, i] + dt * f1
                - np.einsum("bn,bn->b", lam_i, dw)))) / l
        P_paths[:, k, :] = p_k

    bound_ok = np.abs(P_paths) <= rep.epsbar + _CERT_TOL
    frac = float(1.0 - bound_ok.mean())
    lam_mean = np.zeros((N + 1, l, n))
    lam_mean[:N] = Lam_paths.mean(axis=0)
    return RandomSRESolution(
        grid=grid, P=P_paths.mean(axis=0), Lam=lam_mean,
        P_paths=P_paths, Lam_paths=Lam_paths, bound_ok=bound_ok,
        violation_fraction=frac, step_residuals=residuals,
    )


def _h1_paths(p, lam, R, DtD, E, D):
    rhat = R + p[:, None, None] * DtD
    chat = p[:, None] * E + np.einsum("bn,bnm->bm", lam, D)
    sol = np.linalg.solve(rhat, chat[..., None])[..., 0]
    return -np.einsum("bm,bm->b", chat, sol)
