"""Closed-loop simulation, feedback-law synthesis and Monte Carlo verification.

Path generation is counter-based: every Brownian step block and the regime
jump chain come from Philox streams keyed by (seed, purpose, step), so any
block can be regenerated independently and runs are bitwise reproducible at a
fixed seed.  Reductions over paths are performed in fixed path order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import hamiltonian as ham
from .errors import MissingSolution, NonFinite, SaddleViolation
from .model import CONE_FULL, CONE_ORTHANT, CONE_RAYS, ConeSpec, GameModel
from .sre import PhiSolution, SRESolution, TimeGrid, default_grid, _require_same_grid

_W_STREAM = 11
_CHAIN_STREAM = 13
_MAX_JUMP_ROUNDS = 100_000
_X_ZERO = 1e-14


@dataclass
class PathBundle:
    """Brownian increments and regime paths on a grid.

    Regime paths are sampled exactly (exponential holding times, embedded
    jump probabilities) and recorded right-continuously at the grid nodes;
    jumps are snapped to the enclosing interval for coefficient lookup.
    Brownian increments are regenerated on demand per step from the
    counter-based stream, so bundles stay small at large path counts.
    """

    grid: TimeGrid
    M: int
    seed: int
    n: int
    i0: int
    regimes: np.ndarray  # (M, N+1) int16
    _w_cache: Optional[np.ndarray] = field(default=None, repr=False)

    def dw(self, k: int) -> np.ndarray:
        """Increments of W over [t_k, t_{k+1}), shape (M, n)."""
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=[self.seed, _W_STREAM, k])))
        return rng.standard_normal((self.M, self.n)) * np.sqrt(self.grid.dt)

    def dw_all(self) -> np.ndarray:
        return np.stack([self.dw(k) for k in range(self.grid.N)], axis=1)

    def w_nodes(self) -> np.ndarray:
        """Running Brownian values at the nodes (the factor states)."""
        if self._w_cache is None:
            w = np.zeros((self.M, self.grid.N + 1, self.n))
            np.cumsum(self.dw_all(), axis=1, out=w[:, 1:, :])
            self._w_cache = w
        return self._w_cache


def sample_paths(model: GameModel, grid: Optional[TimeGrid], M: int, seed: int) -> PathBundle:
    """Draw M independent (Brownian, regime) path pairs on the grid."""
    if M < 1:
        raise ValueError("path count must be >= 1")
    grid = grid or default_grid(model)
    q = model.gen.q
    l = model.l
    N = grid.N
    t_nodes = grid.nodes()
    regimes = np.full((M, N + 1), model.i0, dtype=np.int16)
    rates = -np.diag(q)
    if np.any(rates > 0.0):
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=[seed, _CHAIN_STREAM])))
        cur = np.full(M, model.i0, dtype=np.int64)
        tnow = np.zeros(M)
        active = rates[cur] > 0.0
        rounds = 0
        while np.any(active):
            rounds += 1
            if rounds > _MAX_JUMP_ROUNDS:
                raise NonFinite("regime chain sampling exceeded the jump budget")
            u = rng.random(M)
            u2 = rng.random(M)
            hold = -np.log(np.clip(u, 1e-300, 1.0)) / np.where(active, rates[cur], 1.0)
            tjump = np.where(active, tnow + hold, np.inf)
            jumping = active & (tjump < grid.T)
            probs = q[cur].copy()
            probs[np.arange(M), cur] = 0.0
            cum = np.cumsum(probs, axis=1)
            total = cum[:, -1]
            draw = u2 * np.where(total > 0.0, total, 1.0)
            nxt = np.argmax(cum > draw[:, None], axis=1)
            nxt = np.where(jumping, nxt, cur)
            mask = jumping[:, None] & (t_nodes[None, :] >= tjump[:, None])
            regimes = np.where(mask, nxt[:, None].astype(np.int16), regimes)
            tnow = np.where(jumping, tjump, tnow)
            cur = nxt
            active = jumping & (rates[cur] > 0.0)
    return PathBundle(grid=grid, M=M, seed=seed, n=model.sys.n, i0=model.i0,
                      regimes=regimes)


# ---------------------------------------------------------------------------
# Feedback laws
# ---------------------------------------------------------------------------

@dataclass
class FeedbackLaw:
    """Closed-form state-feedback maps for one player pairing.

    ``control(k, i, x)`` is the independent control of ``control_player`` and
    ``strategy(k, i, x, u_op)`` the opponent's best response to the observed
    control, both vectorized over a batch of states.
    """

    kind: str
    grid: TimeGrid
    control_player: int
    strategy_player: int
    control: Callable
    strategy: Callable
    aux: dict = field(default_factory=dict, repr=False)


def _batch_responder(Q: np.ndarray, cone: ConeSpec, sense: int):
    """Vectorized cone extremum of v'Qv + 2q'v over batches of q."""
    if cone.kind == CONE_RAYS:
        gen = cone.rays
        inner = _batch_responder_core(gen @ Q @ gen.T, CONE_ORTHANT, sense, gen.shape[0])
        return lambda qv: inner(qv @ gen.T) @ gen
    return _batch_responder_core(Q, cone.kind, sense, Q.shape[0])


def _batch_responder_core(Q: np.ndarray, kind: str, sense: int, dim: int):
    if kind == CONE_FULL:
        qinv = np.linalg.inv(Q)

        def full_resp(qv):
            return -qv @ qinv.T

        return full_resp
    if kind != CONE_ORTHANT:  # pragma: no cover - guarded upstream
        raise ValueError(kind)
    if dim <= 3:
        scale = 1.0 + float(np.abs(Q).max())
        patterns = []
        for r in range(dim + 1):
            for free in itertools.combinations(range(dim), r):
                f = list(free)
                sub = np.zeros((dim, dim))
                if f:
                    sub[np.ix_(f, f)] = np.linalg.pinv(Q[np.ix_(f, f)])
                sel = np.zeros(dim)
                sel[f] = 1.0
                patterns.append((sel, sub))

        def orthant_resp(qv):
            B = qv.shape[0]
            out = np.zeros((B, dim))
            done = np.zeros(B, dtype=bool)
            tol = 1e-10 * (scale + np.abs(qv).max(initial=0.0))
            for sel, sub in patterns:
                v = -(qv @ sub.T) * sel[None, :]
                grad = 2.0 * (v @ Q.T + qv)
                feas = np.all(v * sel[None, :] >= -tol, axis=1)
                stat = np.all(np.abs(grad) * sel[None, :] <= tol * 10, axis=1)
                if sense > 0:
                    mult = np.all(np.where(sel[None, :] > 0, -np.inf, grad) <= tol, axis=1)
                else:
                    mult = np.all(np.where(sel[None, :] > 0, np.inf, grad) >= -tol, axis=1)
                ok = feas & stat & mult & ~done
                if np.any(ok):
                    out[ok] = np.maximum(v[ok], 0.0)
                    done |= ok
            if not np.all(done):  # rare degeneracy: exact fallback
                idx = np.flatnonzero(~done)
                cone = ConeSpec(CONE_ORTHANT, dim)
                for j in idx:
                    out[j] = ham.cone_extremum(Q, qv[j], cone, sense)[0]
            return out

        return orthant_resp

    cone = ConeSpec(CONE_ORTHANT, dim)

    def slow_resp(qv):
        return np.stack([ham.cone_extremum(Q, row, cone, sense)[0] for row in qv])

    return slow_resp


def _node_rows(model: GameModel, grid: TimeGrid) -> np.ndarray:
    rows = np.array([model.table_index(min(k, grid.N - 1) * grid.dt)
                     for k in range(grid.N + 1)])
    rows[grid.N] = model.table_index(grid.T)
    return rows


def build_feedback(model: GameModel, sre: SRESolution, phi: Optional[PhiSolution],
                   which: str, sre_neg: Optional[SRESolution] = None,
                   check_consistency: bool = True) -> FeedbackLaw:
    """Assemble the closed-form feedback laws from solved fields.

    ``which`` selects the pairing: ``unconstrained1`` gives (u1*, beta2*),
    ``unconstrained2`` gives (u2*, beta1*); the ``constrained`` variants give
    the positive/negative-part laws and need both Riccati branches.  The
    mutual consistency identities u1* = beta1*(u2*) and u2* = beta2*(u1*)
    are spot-checked on a sample of states.
    """
    if sre is None:
        raise MissingSolution("a solved Riccati field is required")
    grid = sre.grid
    if which in ("unconstrained1", "unconstrained2"):
        law = _build_unconstrained(model, sre, phi, which, grid)
    elif which in ("constrained1", "constrained2"):
        if sre_neg is None:
            raise MissingSolution("constrained laws need both Riccati branches")
        _require_same_grid(sre.grid, sre_neg.grid)
        law = _build_constrained(model, sre, sre_neg, which, grid)
    else:
        raise ValueError(f"unknown feedback kind {which!r}")
    if check_consistency:
        _spot_check_consistency(model, sre, phi, sre_neg, grid)
    return law


def _law_tables(model: GameModel, sre: SRESolution, phi: Optional[PhiSolution], grid: TimeGrid):
    """Per-node Schur pieces for the unconstrained laws."""
    N, l = grid.N, model.l
    m1, m2 = model.sys.m1, model.sys.m2
    rows = _node_rows(model, grid)
    phiv = phi.phi if phi is not None else np.zeros((N + 1, l))
    tabs = {name: np.zeros((N + 1, l) + shape) for name, shape in (
        ("u1_gain", (m1,)), ("u1_off", (m1,)),
        ("u2_gain", (m2,)), ("u2_off", (m2,)),
        ("b2_mat", (m2, m1)), ("b2_x", (m2,)), ("b2_off", (m2,)),
        ("b1_mat", (m1, m2)), ("b1_x", (m1,)), ("b1_off", (m1,)),
        ("rhat22", (m2, m2)), ("rtilde11", (m1, m1)),
    )}
    for k in range(N + 1):
        for i in range(l):
            co = model.coeffs_at(rows[k], i)
            ev = ham.assemble(sre.P[k, i], sre.Lam[k, i], phiv[k, i], None, co)
            s22 = np.linalg.solve(ev.rhat22, np.stack([ev.chat2, ev.sigmahat2], axis=1))
            uc = ev.chat1 - ev.rhat12 @ s22[:, 0]
            us = ev.sigmahat1 - ev.rhat12 @ s22[:, 1]
            tabs["u1_gain"][k, i] = -np.linalg.solve(ev.rtilde11, uc)
            tabs["u1_off"][k, i] = -np.linalg.solve(ev.rtilde11, us)
            s11 = np.linalg.solve(ev.rhat11, np.stack([ev.chat1, ev.sigmahat1], axis=1))
            wc = ev.chat2 - ev.rhat12.T @ s11[:, 0]
            ws = ev.sigmahat2 - ev.rhat12.T @ s11[:, 1]
            tabs["u2_gain"][k, i] = -np.linalg.solve(ev.rtilde22, wc)
            tabs["u2_off"][k, i] = -np.linalg.solve(ev.rtilde22, ws)
            inv22 = np.linalg.inv(ev.rhat22)
            inv11 = np.linalg.inv(ev.rhat11)
            tabs["b2_mat"][k, i] = -inv22 @ ev.rhat12.T
            tabs["b2_x"][k, i] = -inv22 @ ev.chat2
            tabs["b2_off"][k, i] = -inv22 @ ev.sigmahat2
            tabs["b1_mat"][k, i] = -inv11 @ ev.rhat12
            tabs["b1_x"][k, i] = -inv11 @ ev.chat1
            tabs["b1_off"][k, i] = -inv11 @ ev.sigmahat1
            tabs["rhat22"][k, i] = ev.rhat22
            tabs["rtilde11"][k, i] = ev.rtilde11
    return tabs


def _build_unconstrained(model, sre, phi, which, grid):
    if phi is None and not model.is_homogeneous:
        raise MissingSolution("inhomogeneous laws need the solved affine term")
    tabs = _law_tables(model, sre, phi, grid)

    if which == "unconstrained1":
        def control(k, i, x):
            return np.outer(x, tabs["u1_gain"][k, i]) + tabs["u1_off"][k, i]

        def strategy(k, i, x, u_op):
            return (u_op @ tabs["b2_mat"][k, i].T + np.outer(x, tabs["b2_x"][k, i])
                    + tabs["b2_off"][k, i])

        return FeedbackLaw(kind=which, grid=grid, control_player=1, strategy_player=2,
                           control=control, strategy=strategy, aux=tabs)

    def control(k, i, x):
        return np.outer(x, tabs["u2_gain"][k, i]) + tabs["u2_off"][k, i]

    def strategy(k, i, x, u_op):
        return (u_op @ tabs["b1_mat"][k, i].T + np.outer(x, tabs["b1_x"][k, i])
                + tabs["b1_off"][k, i])

    return FeedbackLaw(kind=which, grid=grid, control_player=2, strategy_player=1,
                       control=control, strategy=strategy, aux=tabs)


def _build_constrained(model, sre_pos, sre_neg, which, grid):
    N, l = grid.N, model.l
    m1, m2 = model.sys.m1, model.sys.m2
    cone1, cone2 = model.cones
    rows = _node_rows(model, grid)
    v11 = np.zeros((N + 1, l, m1))
    v12 = np.zeros((N + 1, l, m1))
    v21 = np.zeros((N + 1, l, m2))
    v22 = np.zeros((N + 1, l, m2))
    resp = {}
    for k in range(N + 1):
        for i in range(l):
            co = model.coeffs_at(rows[k], i)
            bp = ham._blocks(float(sre_pos.P[k, i]), np.zeros(model.sys.n), co)
            bn = ham._blocks(float(sre_neg.P[k, i]), np.zeros(model.sys.n), co)
            v11[k, i], v21[k, i] = ham.saddle_qp(bp[0], bp[1], bp[2], bp[3], bp[4],
                                                 cone1, cone2)
            v12[k, i], v22[k, i] = ham.saddle_qp(bn[0], bn[1], bn[2], -bn[3], -bn[4],
                                                 cone1, cone2)
            resp[(k, i)] = {
                "pos": (bp, _batch_responder(bp[2], cone2, -1), _batch_responder(bp[0], cone1, +1)),
                "neg": (bn, _batch_responder(bn[2], cone2, -1), _batch_responder(bn[0], cone1, +1)),
            }

    def scaled(x, u_op):
        v = np.zeros_like(u_op)
        big = np.abs(x) > _X_ZERO
        v[big] = u_op[big] / np.abs(x[big])[:, None]
        return v

    def control1(k, i, x):
        return np.outer(np.maximum(x, 0.0), v11[k, i]) + np.outer(np.maximum(-x, 0.0), v12[k, i])

    def strategy2(k, i, x, u1):
        v1 = scaled(x, u1)
        bp, min_p, _ = resp[(k, i)]["pos"]
        bn, min_n, _ = resp[(k, i)]["neg"]
        beta_pos = min_p(v1 @ bp[1] + bp[4])
        beta_neg = min_n(v1 @ bn[1] - bn[4])
        return (beta_pos * np.maximum(x, 0.0)[:, None]
                + beta_neg * np.maximum(-x, 0.0)[:, None])

    def control2(k, i, x):
        return np.outer(np.maximum(x, 0.0), v21[k, i]) + np.outer(np.maximum(-x, 0.0), v22[k, i])

    def strategy1(k, i, x, u2):
        v2 = scaled(x, u2)
        bp, _, max_p = resp[(k, i)]["pos"]
        bn, _, max_n = resp[(k, i)]["neg"]
        beta_pos = max_p(v2 @ bp[1].T + bp[3])
        beta_neg = max_n(v2 @ bn[1].T - bn[3])
        return (beta_pos * np.maximum(x, 0.0)[:, None]
                + beta_neg * np.maximum(-x, 0.0)[:, None])

    aux = {"v11": v11, "v12": v12, "v21": v21, "v22": v22}
    if which == "constrained1":
        return FeedbackLaw(kind=which, grid=grid, control_player=1, strategy_player=2,
                           control=control1, strategy=strategy2, aux=aux)
    return FeedbackLaw(kind=which, grid=grid, control_player=2, strategy_player=1,
                       control=control2, strategy=strategy1, aux=aux)


def _spot_check_consistency(model, sre, phi, sre_neg, grid, tol: float = 1e-9,
                            samples: int = 16):
    u1s, u2s, gaps = consistency_gaps(model, sre, phi, sre_neg, grid, samples)
    worst = max(gaps)
    if worst > tol * max(1.0, u1s, u2s):
        raise MissingSolution(
            f"feedback consistency identities fail (gap {worst:.3e}); "
            "the supplied solutions do not belong to this model")


def consistency_gaps(model, sre, phi, sre_neg, grid, samples: int = 16):
    """Max |u1* - beta1*(u2*)| and |u2* - beta2*(u1*)| over sampled states."""
    rng = np.random.default_rng(0)
    ks = rng.integers(0, grid.N + 1, size=samples)
    xs = rng.normal(scale=1.5, size=samples)
    if sre_neg is None:
        law1 = _build_unconstrained(model, sre, phi, "unconstrained1", grid)
        law2 = _build_unconstrained(model, sre, phi, "unconstrained2", grid)
    else:
        law1 = _build_constrained(model, sre, sre_neg, "constrained1", grid)
        law2 = _build_constrained(model, sre, sre_neg, "constrained2", grid)
    gaps = []
    scale1 = scale2 = 0.0
    for k in ks:
        for i in range(model.l):
            x = xs[: max(4, samples // 4)]
            u1 = law1.control(k, i, x)
            u2 = law2.control(k, i, x)
            b2 = law1.strategy(k, i, x, u1)
            b1 = law2.strategy(k, i, x, u2)
            gaps.append(float(np.abs(u1 - b1).max()))
            gaps.append(float(np.abs(u2 - b2).max()))
            scale1 = max(scale1, float(np.abs(u1).max()))
            scale2 = max(scale2, float(np.abs(u2).max()))
    return scale1, scale2, gaps


# ---------------------------------------------------------------------------
# Simulation and objective estimation
# ---------------------------------------------------------------------------

def _normalize_players(model: GameModel, player1, player2):
    """Resolve (player1, player2) into evaluation-ordered callables."""
    m1, m2 = model.sys.m1, model.sys.m2

    def wrap(p, m):
        if isinstance(p, FeedbackLaw):
            return p
        if isinstance(p, tuple) and len(p) == 2 and p[0] in ("control", "strategy"):
            return p
        if isinstance(p, np.ndarray) or np.isscalar(p):
            val = np.broadcast_to(np.asarray(p, dtype=float), (m,))

            def const(k, i, x, val=val):
                return np.broadcast_to(val, (x.shape[0], m))

            return ("control", const)
        if callable(p):
            return ("control", p)
        raise ValueError(f"cannot interpret player input {p!r}")

    p1 = wrap(player1, m1)
    p2 = wrap(player2, m2)

    def role(p, want_ctl, want_str):
        if isinstance(p, FeedbackLaw):
            if p.control_player == want_ctl:
                return ("control", p.control)
            if p.strategy_player == want_str:
                return ("strategy", p.strategy)
            raise ValueError(f"law {p.kind} does not provide player {want_ctl}")
        return p

    r1 = role(p1, 1, 1)
    r2 = role(p2, 2, 2)
    if r1[0] == "strategy" and r2[0] == "strategy":
        raise ValueError("at most one player may be a strategy")
    return r1, r2


def _step_controls(r1, r2, k, i, x):
    if r1[0] == "control":
        u1 = r1[1](k, i, x)
        u2 = r2[1](k, i, x, u1) if r2[0] == "strategy" else r2[1](k, i, x)
    else:
        u2 = r2[1](k, i, x)
        u1 = r1[1](k, i, x, u2)
    return u1, u2


def simulate_closed_loop(model: GameModel, player1, player2,
                         bundle: PathBundle) -> np.ndarray:
    """Euler-Maruyama closed-loop state paths, one row per sample path."""
    r1, r2 = _normalize_players(model, player1, player2)
    grid = bundle.grid
    N, dt = grid.N, grid.dt
    X = np.empty((bundle.M, N + 1))
    X[:, 0] = model.x0
    x = X[:, 0].copy()
    for k in range(N):
        dw = bundle.dw(k)
        row = model.table_index(k * dt)
        xn = np.empty_like(x)
        for i in np.unique(bundle.regimes[:, k]):
            mask = bundle.regimes[:, k] == i
            co = model.coeffs_at(row, int(i))
            xi = x[mask]
            u1, u2 = _step_controls(r1, r2, k, int(i), xi)
            drift = co.A * xi + u1 @ co.B1 + u2 @ co.B2 + co.b
            diff = (np.outer(xi, co.C) + u1 @ co.D1.T + u2 @ co.D2.T + co.sigma)
            xn[mask] = xi + drift * dt + np.einsum("bn,bn->b", diff, dw[mask])
        if not np.all(np.isfinite(xn)):
            raise NonFinite(f"state became non-finite at step {k}")
        x = xn
        X[:, k + 1] = x
    return X


def simulate_with_controls(model: GameModel, player1, player2, bundle: PathBundle):
    """Closed-loop paths plus the controls applied at every node.

    Meant for trace output on small bundles; controls at the terminal node
    are the law evaluations used by the running-cost quadrature.
    """
    r1, r2 = _normalize_players(model, player1, player2)
    grid = bundle.grid
    N, dt = grid.N, grid.dt
    X = np.empty((bundle.M, N + 1))
    U1 = np.empty((bundle.M, N + 1, model.sys.m1))
    U2 = np.empty((bundle.M, N + 1, model.sys.m2))
    X[:, 0] = model.x0
    x = X[:, 0].copy()
    for k in range(N + 1):
        row = model.table_index(min(k, N - 1) * dt) if k < N else model.table_index(grid.T)
        dw = bundle.dw(k) if k < N else None
        xn = np.empty_like(x) if k < N else None
        for i in np.unique(bundle.regimes[:, k]):
            mask = bundle.regimes[:, k] == i
            co = model.coeffs_at(row, int(i))
            xi = x[mask]
            u1, u2 = _step_controls(r1, r2, k, int(i), xi)
            U1[mask, k] = u1
            U2[mask, k] = u2
            if k < N:
                drift = co.A * xi + u1 @ co.B1 + u2 @ co.B2 + co.b
                diff = (np.outer(xi, co.C) + u1 @ co.D1.T + u2 @ co.D2.T + co.sigma)
                xn[mask] = xi + drift * dt + np.einsum("bn,bn->b", diff, dw[mask])
        if k < N:
            if not np.all(np.isfinite(xn)):
                raise NonFinite(f"state became non-finite at step {k}")
            x = xn
            X[:, k + 1] = x
    return X, U1, U2


def _objective_paths(model: GameModel, player1, player2, bundle: PathBundle,
                     penalty_tabs: Optional[dict] = None,
                     law1_ref=None) -> tuple:
    """Per-path objective (and optional completing-square penalty integrals).

    The running cost is integrated with the trapezoidal rule; the terminal
    cost is exact.  When ``penalty_tabs`` is given, the quadratic penalty
    of the pathwise value identity is accumulated along the same paths.
    """
    r1, r2 = _normalize_players(model, player1, player2)
    grid = bundle.grid
    N, dt = grid.N, grid.dt
    cost = np.zeros(bundle.M)
    pen = np.zeros(bundle.M) if penalty_tabs is not None else None
    x = np.full(bundle.M, float(model.x0))
    for k in range(N + 1):
        row = model.table_index(min(k, N - 1) * dt) if k < N else model.table_index(grid.T)
        w = dt if 0 < k < N else 0.5 * dt
        xn = np.empty_like(x) if k < N else None
        dw = bundle.dw(k) if k < N else None
        for i in np.unique(bundle.regimes[:, k]):
            mask = bundle.regimes[:, k] == i
            co = model.coeffs_at(row, int(i))
            xi = x[mask]
            u1, u2 = _step_controls(r1, r2, k, int(i), xi)
            run = (co.K * xi ** 2
                   + np.einsum("bm,mk,bk->b", u1, co.R11, u1)
                   + 2.0 * np.einsum("bm,mk,bk->b", u1, co.R12, u2)
                   + np.einsum("bm,mk,bk->b", u2, co.R22, u2))
            cost[mask] += w * run
            if pen is not None:
                u1_star = law1_ref.control(k, int(i), xi)
                b2_star = law1_ref.strategy(k, int(i), xi, u1)
                d2 = u2 - b2_star
                d1 = u1 - u1_star
                pen[mask] += w * (
                    np.einsum("bm,mk,bk->b", d2, penalty_tabs["rhat22"][k, i], d2)
                    + np.einsum("bm,mk,bk->b", d1, penalty_tabs["rtilde11"][k, i], d1))
            if k < N:
                drift = co.A * xi + u1 @ co.B1 + u2 @ co.B2 + co.b
                diff = (np.outer(xi, co.C) + u1 @ co.D1.T + u2 @ co.D2.T + co.sigma)
                xn[mask] = xi + drift * dt + np.einsum("bn,bn->b", diff, dw[mask])
        if k < N:
            if not np.all(np.isfinite(xn)):
                raise NonFinite(f"state became non-finite at step {k}")
            x = xn
    cost += model.cost.G[bundle.regimes[:, N]] * x ** 2
    if not np.all(np.isfinite(cost)):
        raise NonFinite("objective accumulated a non-finite value")
    return cost, pen


def estimate_objective(model: GameModel, player1, player2,
                       bundle: PathBundle) -> tuple:
    """Monte Carlo objective estimate and its standard error."""
    j, _ = _objective_paths(model, player1, player2, bundle)
    return float(j.mean()), float(j.std(ddof=1) / np.sqrt(bundle.M))


def constrained_phi_residual(model: GameModel, sre_pos: SRESolution,
                             sre_neg: SRESolution, bundle: PathBundle,
                             player1, player2) -> tuple:
    """Time integral of the cone-game pointwise identity along paths.

    The integrand combines the control quadratics, the state-control cross
    terms, and the positive/negative-branch Hamiltonians; along the optimal
    pair it vanishes identically, so its path mean is a sharp diagnostic.
    Returns (mean, stderr, per-path integrals).
    """
    grid = bundle.grid
    _require_same_grid(grid, sre_pos.grid)
    r1, r2 = _normalize_players(model, player1, player2)
    N, dt = grid.N, grid.dt
    l = model.l
    rows = _node_rows(model, grid)
    blocks_pos = {}
    blocks_neg = {}
    htil = np.zeros((N + 1, l, 2))
    for k in range(N + 1):
        for i in range(l):
            co = model.coeffs_at(rows[k], i)
            bp = ham._blocks(float(sre_pos.P[k, i]), sre_pos.Lam[k, i], co)
            bn = ham._blocks(float(sre_neg.P[k, i]), sre_neg.Lam[k, i], co)
            blocks_pos[(k, i)] = bp
            blocks_neg[(k, i)] = bn
            h1, _ = ham.htilde_pair(float(sre_pos.P[k, i]), sre_pos.Lam[k, i],
                                    model.cones, co)
            _, h2 = ham.htilde_pair(float(sre_neg.P[k, i]), sre_neg.Lam[k, i],
                                    model.cones, co)
            htil[k, i] = (h1, h2)

    acc = np.zeros(bundle.M)
    x = np.full(bundle.M, float(model.x0))
    for k in range(N + 1):
        w = dt if 0 < k < N else 0.5 * dt
        dw = bundle.dw(k) if k < N else None
        xn = np.empty_like(x) if k < N else None
        row = rows[k]
        for i in np.unique(bundle.regimes[:, k]):
            mask = bundle.regimes[:, k] == i
            co = model.coeffs_at(row, int(i))
            xi = x[mask]
            u1, u2 = _step_controls(r1, r2, k, int(i), xi)
            xp = np.maximum(xi, 0.0)
            xm = np.maximum(-xi, 0.0)
            val = np.zeros(xi.shape[0])
            for sgn, blocks, col, xpart in ((+1, blocks_pos[(k, int(i))], 0, xp),
                                            (-1, blocks_neg[(k, int(i))], 1, xm)):
                r11, r12, r22, c1, c2 = blocks
                ind = xi > 0.0 if sgn > 0 else xi < 0.0
                quad = (np.einsum("bm,mk,bk->b", u1, r11, u1)
                        + 2.0 * np.einsum("bm,mk,bk->b", u1, r12, u2)
                        + np.einsum("bm,mk,bk->b", u2, r22, u2)) * ind
                cross = 2.0 * sgn * xpart * (u1 @ c1 + u2 @ c2)
                val += quad + cross - xpart ** 2 * htil[k, int(i), col]
            acc[mask] += w * val
            if k < N:
                drift = co.A * xi + u1 @ co.B1 + u2 @ co.B2 + co.b
                diff = (np.outer(xi, co.C) + u1 @ co.D1.T + u2 @ co.D2.T + co.sigma)
                xn[mask] = xi + drift * dt + np.einsum("bn,bn->b", diff, dw[mask])
        if k < N:
            if not np.all(np.isfinite(xn)):
                raise NonFinite(f"state became non-finite at step {k}")
            x = xn
    return float(acc.mean()), float(acc.std(ddof=1) / np.sqrt(bundle.M)), acc


# ---------------------------------------------------------------------------
# Exact value formulas
# ---------------------------------------------------------------------------

def chain_marginal(model: GameModel, grid: TimeGrid) -> np.ndarray:
    """Marginal law of the regime chain at every node (forward equation)."""
    qT = model.gen.q.T
    p = np.zeros((grid.N + 1, model.l))
    p[0, model.i0] = 1.0
    dt = grid.dt
    for k in range(grid.N):
        y = p[k]
        k1 = qT @ y
        k2 = qT @ (y + 0.5 * dt * k1)
        k3 = qT @ (y + 0.5 * dt * k2)
        k4 = qT @ (y + dt * k3)
        p[k + 1] = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


def value_formula(model: GameModel, sre: SRESolution,
                  phi: Optional[PhiSolution] = None,
                  sre_neg: Optional[SRESolution] = None) -> float:
    """Exact game value at the initial state.

    Unconstrained: P(0,i0) x^2 + 2 phi(0,i0) x plus the time integral of the
    chain-averaged inhomogeneity (P sigma'sigma + 2(phi b + sigma'Delta) +
    H3).  Constrained (``sre_neg`` given): the positive/negative-part
    quadratic with no integral term (homogeneous dynamics).
    """
    x = model.x0
    i0 = model.i0
    if sre_neg is not None:
        if not model.is_homogeneous:
            raise MissingSolution("the split value formula needs homogeneous dynamics")
        xp, xm = max(x, 0.0), max(-x, 0.0)
        return float(sre.P[0, i0] * xp ** 2 + sre_neg.P[0, i0] * xm ** 2)
    grid = sre.grid
    if phi is None:
        if not model.is_homogeneous:
            raise MissingSolution("inhomogeneous value needs the solved affine term")
        phiv = np.zeros((grid.N + 1, model.l))
    else:
        _require_same_grid(grid, phi.grid)
        phiv = phi.phi
    v0 = float(sre.P[0, i0] * x ** 2 + 2.0 * phiv[0, i0] * x)
    if model.is_homogeneous:
        return v0
    marg = chain_marginal(model, grid)
    rows = _node_rows(model, grid)
    integrand = np.zeros(grid.N + 1)
    for k in range(grid.N + 1):
        acc = 0.0
        for i in range(model.l):
            co = model.coeffs_at(rows[k], i)
            ev = ham.assemble(sre.P[k, i], sre.Lam[k, i], phiv[k, i], None, co)
            sig2 = float(co.sigma @ co.sigma)
            acc += marg[k, i] * (sre.P[k, i] * sig2 + 2.0 * phiv[k, i] * co.b + ev.h3)
        integrand[k] = acc
    return v0 + float(np.trapezoid(integrand, dx=grid.dt))


# ---------------------------------------------------------------------------
# Saddle-point verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Perturbation:
    """Additive shift applied to one side of the optimal pair."""

    target: str          # "u1" | "beta2"
    shift: Union[float, np.ndarray, Callable]
    label: str = ""

    def fn(self, m: int):
        if callable(self.shift):
            return self.shift
        val = np.broadcast_to(np.asarray(self.shift, dtype=float), (m,))

        def const(k, i, x, val=val):
            return np.broadcast_to(val, (x.shape[0], m))

        return const


@dataclass(frozen=True)
class CheckResult:
    name: str
    statistic: float
    stderr: float
    side: str            # "two" | "le" | "ge"
    soft: float
    hard: float
    passed_soft: bool
    passed_hard: bool


@dataclass(frozen=True)
class SimulationReport:
    """Monte Carlo verdicts for the saddle-point and value identities."""

    jhat: float
    stderr: float
    paths: int
    value: float
    checks: tuple

    @property
    def all_soft(self) -> bool:
        return all(c.passed_soft for c in self.checks)

    def as_text(self) -> str:
        lines = [
            f"paths {self.paths}",
            f"objective {self.jhat:.10g} +/- {self.stderr:.4g}",
            f"value_formula {self.value:.10g}",
        ]
        for c in self.checks:
            verdict = "pass" if c.passed_soft else ("HARD-FAIL" if not c.passed_hard else "soft-fail")
            lines.append(f"check {c.name}: stat {c.statistic:.6g} stderr {c.stderr:.4g} "
                         f"side {c.side} -> {verdict}")
        return "\n".join(lines) + "\n"


def _verdict(name, stat, se, side, soft, hard):
    if side == "two":
        ok_soft, ok_hard = abs(stat) <= soft * se, abs(stat) <= hard * se
    elif side == "le":
        ok_soft, ok_hard = stat <= soft * se, stat <= hard * se
    else:
        ok_soft, ok_hard = stat >= -soft * se, stat >= -hard * se
    return CheckResult(name, float(stat), float(se), side, soft, hard, ok_soft, ok_hard)


def _shifted_control(base, shift_fn):
    def control(k, i, x):
        return base(k, i, x) + shift_fn(k, i, x)

    return control


def _shifted_strategy(base, shift_fn):
    def strategy(k, i, x, u_op):
        return base(k, i, x, u_op) + shift_fn(k, i, x)

    return strategy


def saddle_check(model: GameModel, sre: SRESolution, phi: Optional[PhiSolution],
                 bundle: PathBundle, perturbations: Sequence[Perturbation],
                 soft: float = 3.0, hard: float = 5.0) -> SimulationReport:
    """Verify the saddle property and the pathwise value identity by Monte Carlo.

    All comparisons reuse the same path bundle (common random numbers), so
    the verdict statistics are pathwise differences.  A soft failure is
    reported; a hard failure (beyond ``hard`` standard errors) raises.
    """
    law1 = build_feedback(model, sre, phi, "unconstrained1")
    m1, m2 = model.sys.m1, model.sys.m2
    v_exact = value_formula(model, sre, phi)
    j_base, _ = _objective_paths(model, law1, law1, bundle)
    jhat = float(j_base.mean())
    se = float(j_base.std(ddof=1) / np.sqrt(bundle.M))
    checks = [_verdict("value_match", jhat - v_exact, se, "two", soft, hard)]

    for idx, pert in enumerate(perturbations):
        label = pert.label or f"{pert.target}_shift_{idx}"
        if pert.target == "u1":
            pl1 = _shifted_control(law1.control, pert.fn(m1))
            j_alt, _ = _objective_paths(model, ("control", pl1), law1, bundle)
            d = j_alt - j_base
            se_d = float(d.std(ddof=1) / np.sqrt(bundle.M))
            checks.append(_verdict(f"maximizer_{label}", float(d.mean()), se_d,
                                   "le", soft, hard))
        elif pert.target == "beta2":
            pl2 = _shifted_strategy(law1.strategy, pert.fn(m2))
            j_alt, _ = _objective_paths(model, law1, ("strategy", pl2), bundle)
            d = j_alt - j_base
            se_d = float(d.std(ddof=1) / np.sqrt(bundle.M))
            checks.append(_verdict(f"minimizer_{label}", float(d.mean()), se_d,
                                   "ge", soft, hard))
        else:
            raise ValueError(f"unknown perturbation target {pert.target!r}")

    # Pathwise completing-the-square residual for an arbitrary off-saddle pair.
    probe1 = _shifted_control(law1.control, Perturbation("u1", 0.25).fn(m1))
    probe2 = _shifted_strategy(law1.strategy, Perturbation("beta2", -0.2).fn(m2))
    j_pair, pen = _objective_paths(model, ("control", probe1), ("strategy", probe2),
                                   bundle, penalty_tabs=law1.aux, law1_ref=law1)
    res = j_pair - pen - v_exact
    se_r = float(res.std(ddof=1) / np.sqrt(bundle.M))
    checks.append(_verdict("square_residual", float(res.mean()), se_r, "two", soft, hard))

    report = SimulationReport(jhat=jhat, stderr=se, paths=bundle.M,
                              value=v_exact, checks=tuple(checks))
    bad = [c.name for c in checks if not c.passed_hard]
    if bad:
        raise SaddleViolation("hard saddle-point failures: " + ", ".join(bad))
    return report
