"""Indefinite-quadratic Hamiltonians and their cone-constrained counterparts.

Everything here is a pure function of its inputs and safe to call
concurrently.  Matrix dimensions are tiny (controls per player rarely exceed
three), so exact active-set enumeration is the workhorse for cone problems.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConeUnsupported, MinimaxGapExceeded, SingularBlock
from .model import (CONE_FULL, CONE_ORTHANT, CONE_RAYS, AssumptionReport,
                    Coeffs, ConeSpec)

_ZERO_CLIP = 1e-13
_KKT_TOL = 1e-10
_ENUM_LIMIT = 10  # max orthant dimension for exact pattern enumeration


@dataclass(frozen=True)
class HamiltonianEval:
    """Schur pieces and Hamiltonian values at one (t, i, P, Lambda, phi, Delta).

    ``h1/h2/h3`` come from the factorization that eliminates the second
    player's block first; ``*_alt`` from the mirror factorization.  The two
    agree up to roundoff; ``form_gap`` records the worst relative spread.
    """

    rhat11: np.ndarray
    rhat12: np.ndarray
    rhat22: np.ndarray
    rtilde11: np.ndarray
    rtilde22: np.ndarray
    chat1: np.ndarray
    chat2: np.ndarray
    sigmahat1: np.ndarray
    sigmahat2: np.ndarray
    h1: float
    h2: float
    h3: float
    h1_alt: float
    h2_alt: float
    h3_alt: float
    form_gap: float


def _blocks(P: float, lam: np.ndarray, co: Coeffs):
    """Control-weight blocks and linear terms at the evaluation point."""
    r11 = co.R11 + P * (co.D1.T @ co.D1)
    r12 = co.R12 + P * (co.D1.T @ co.D2)
    r22 = co.R22 + P * (co.D2.T @ co.D2)
    pc = P * co.C + lam
    chat1 = P * co.B1 + co.D1.T @ pc
    chat2 = P * co.B2 + co.D2.T @ pc
    return r11, r12, r22, chat1, chat2


def _check_definite(r11, r22, eps_margin: Optional[float]):
    lam_hi = float(np.linalg.eigvalsh(r11).max())
    lam_lo = float(np.linalg.eigvalsh(r22).min())
    if eps_margin is not None and eps_margin > 0.0:
        if lam_hi > -eps_margin / 2.0 or lam_lo < eps_margin / 2.0:
            raise SingularBlock(
                f"weight blocks lost the definiteness margin: "
                f"max eig R^11 = {lam_hi:.3e}, min eig R^22 = {lam_lo:.3e}, "
                f"required +/- {eps_margin / 2.0:.3e}")
    else:
        scale = 1.0 + max(float(np.abs(r11).max()), float(np.abs(r22).max()))
        if lam_hi >= -1e-12 * scale or lam_lo <= 1e-12 * scale:
            raise SingularBlock(
                f"weight blocks are not sign definite: "
                f"max eig R^11 = {lam_hi:.3e}, min eig R^22 = {lam_lo:.3e}")


def assemble(P: float, lam: np.ndarray, phi: float, delta: np.ndarray,
             co: Coeffs, constants: Optional[AssumptionReport] = None) -> HamiltonianEval:
    """Evaluate the weight blocks, Schur complements and H1/H2/H3.

    Each Hamiltonian is computed through both Schur factorizations and
    cross-checked; disagreement beyond roundoff raises ``SingularBlock``.
    When ``constants`` is given, the definiteness margin check uses half the
    guaranteed margin and a point outside the certified band |P| <= epsbar
    only triggers a warning.
    """
    P = float(P)
    lam = np.zeros(co.C.shape[0]) if lam is None else np.asarray(lam, dtype=float)
    delta = np.zeros(co.C.shape[0]) if delta is None else np.asarray(delta, dtype=float)
    if constants is not None and abs(P) > constants.epsbar * (1.0 + 1e-12):
        warnings.warn(f"|P| = {abs(P):.6g} exceeds the certified band "
                      f"epsbar = {constants.epsbar:.6g}", stacklevel=2)
    r11, r12, r22, chat1, chat2 = _blocks(P, lam, co)
    _check_definite(r11, r22, constants.epsilon if constants is not None else None)

    ps = P * co.sigma + delta
    sig1 = phi * co.B1 + co.D1.T @ ps
    sig2 = phi * co.B2 + co.D2.T @ ps

    # Factorization eliminating player 2 first.
    y2c = np.linalg.solve(r22, chat2)
    y2s = np.linalg.solve(r22, sig2)
    rt11 = r11 - r12 @ np.linalg.solve(r22, r12.T)
    uc = chat1 - r12 @ y2c
    us = sig1 - r12 @ y2s
    zc = np.linalg.solve(rt11, uc)
    zs = np.linalg.solve(rt11, us)
    h1 = -float(chat2 @ y2c) - float(uc @ zc)
    h2 = -float(chat2 @ y2s) - float(uc @ zs)
    h3 = -float(sig2 @ y2s) - float(us @ zs)

    # Mirror factorization eliminating player 1 first.
    x1c = np.linalg.solve(r11, chat1)
    x1s = np.linalg.solve(r11, sig1)
    rt22 = r22 - r12.T @ np.linalg.solve(r11, r12)
    wc = chat2 - r12.T @ x1c
    ws = sig2 - r12.T @ x1s
    vc = np.linalg.solve(rt22, wc)
    vs = np.linalg.solve(rt22, ws)
    h1b = -float(chat1 @ x1c) - float(wc @ vc)
    h2b = -float(chat1 @ x1s) - float(wc @ vs)
    h3b = -float(sig1 @ x1s) - float(ws @ vs)

    pairs = ((h1, h1b), (h2, h2b), (h3, h3b))
    gap = max(abs(a - b) / max(1.0, abs(a), abs(b)) for a, b in pairs)
    if gap > 1e-6:
        raise SingularBlock(f"Schur factorizations disagree (relative gap {gap:.3e})")

    return HamiltonianEval(
        rhat11=r11, rhat12=r12, rhat22=r22, rtilde11=rt11, rtilde22=rt22,
        chat1=chat1, chat2=chat2, sigmahat1=sig1, sigmahat2=sig2,
        h1=h1, h2=h2, h3=h3, h1_alt=h1b, h2_alt=h2b, h3_alt=h3b, form_gap=gap,
    )


def stack_co(co: Coeffs):
    """Stacked (R, D'D, B + D'C, D) arrays used by the batched H1 evaluator."""
    m1 = co.B1.shape[0]
    m2 = co.B2.shape[0]
    R = np.zeros((m1 + m2, m1 + m2))
    R[:m1, :m1] = co.R11
    R[:m1, m1:] = co.R12
    R[m1:, :m1] = co.R12.T
    R[m1:, m1:] = co.R22
    D = np.concatenate([co.D1, co.D2], axis=1)
    E = np.concatenate([co.B1, co.B2]) + D.T @ co.C
    return R, D.T @ D, E, D


def h1_batch(P: np.ndarray, lam: np.ndarray, R, DtD, E, D) -> np.ndarray:
    """H1 at a batch of (P, Lambda) points via the direct block solve.

    The stacked inputs may be a single coefficient set (broadcast across the
    batch) or carry a leading batch axis of their own.
    """
    P = np.atleast_1d(np.asarray(P, dtype=float))
    nb = P.shape[0]
    if R.ndim == 2:
        R = R[None]
        DtD = DtD[None]
        E = E[None]
        D = D[None]
    rhat = R + P[:, None, None] * DtD
    chat = P[:, None] * E + np.einsum("bn,bnm->bm", np.broadcast_to(lam, (nb, D.shape[1])), D)
    try:
        sol = np.linalg.solve(rhat, chat[..., None])[..., 0]
        out = -np.einsum("bm,bm->b", chat, sol)
    except np.linalg.LinAlgError:
        out = np.full(nb, -np.inf)
        for j in range(nb):
            try:
                out[j] = -float(chat[j] @ np.linalg.solve(rhat[j if rhat.shape[0] > 1 else 0], chat[j]))
            except np.linalg.LinAlgError:
                pass
    out[~np.isfinite(out)] = -np.inf
    return out


def h1_growth_bound(lam_norm: float, constants: AssumptionReport) -> float:
    """2 (c3 epsbar^2 + cbar2 |Lambda|^2) / epsilon, the a priori |H1| bound."""
    if constants.epsilon <= 0.0:
        return np.inf
    return 2.0 * (constants.c3 * constants.epsbar ** 2
                  + constants.cbar2 * lam_norm ** 2) / constants.epsilon


def h1_truncated(k: int, P: float, lam: np.ndarray, co: Coeffs,
                 constants: AssumptionReport, *, coarse: int = 13,
                 refine_rounds: int = 34) -> float:
    """Lipschitz sup-convolution envelope of the truncated H1.

    The candidate function equals H1 on |P~| <= epsbar and 0 outside; the
    envelope subtracts k |P - P~| + k |Lambda - Lambda~|.  The maximization
    runs over a compact box of radius (1 + |Lambda| + epsbar)(1 + cbar2 /
    epsilon)/k + epsbar around the evaluation point (grid search plus
    pattern refinement), and the result is capped at the growth bound so the
    envelope inherits the a priori estimate.  The cap and shrinking box keep
    the family nonincreasing in k and above the truncated function.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    P = float(P)
    n = co.C.shape[0]
    lam = np.zeros(n) if lam is None else np.asarray(lam, dtype=float)
    ebar = constants.epsbar
    eps = constants.epsilon
    lam_norm = float(np.linalg.norm(lam))
    fac = 1.0 + (constants.cbar2 / eps if eps > 0.0 else 1.0)
    radius = (1.0 + lam_norm + ebar) * fac / k + ebar

    R, DtD, E, D = stack_co(co)

    def objective(p_cand, lam_cand):
        vals = h1_batch(p_cand, lam_cand, R, DtD, E, D)
        pen = k * np.abs(p_cand - P) + k * np.linalg.norm(lam_cand - lam, axis=1)
        return vals - pen

    lo = max(-ebar, P - radius)
    hi = min(ebar, P + radius)
    best_val = -np.inf
    best_pt = None
    if lo <= hi:
        n_lam = 7 if n <= 2 else max(3, int(4000 ** (1.0 / n)))
        axes = [np.linspace(lo, hi, coarse)]
        axes += [np.linspace(lam[j] - radius, lam[j] + radius, n_lam) for j in range(n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        p_cand = mesh[0].ravel()
        lam_cand = np.stack([m.ravel() for m in mesh[1:]], axis=1)
        if abs(P) <= ebar:  # guarantee the envelope dominates the point value
            p_cand = np.append(p_cand, P)
            lam_cand = np.vstack([lam_cand, lam])
        vals = objective(p_cand, lam_cand)
        j = int(np.argmax(vals))
        best_val = float(vals[j])
        best_pt = (float(p_cand[j]), lam_cand[j].copy())

        step = max((hi - lo) / (coarse - 1), radius / 4.0)
        offsets = np.array(list(itertools.product([-1.0, 0.0, 1.0], repeat=1 + n)))
        for _ in range(refine_rounds):
            pts = np.concatenate([[best_pt[0]], best_pt[1]]) + step * offsets
            p_cand = np.clip(pts[:, 0], lo, hi)
            lam_cand = np.clip(pts[:, 1:], lam - radius, lam + radius)
            vals = objective(p_cand, lam_cand)
            j = int(np.argmax(vals))
            if vals[j] > best_val:
                best_val = float(vals[j])
                best_pt = (float(p_cand[j]), lam_cand[j].copy())
            else:
                step *= 0.5

    outside = 0.0 if abs(P) > ebar else -k * (ebar - abs(P))
    return min(max(best_val, outside), h1_growth_bound(lam_norm, constants))


# ---------------------------------------------------------------------------
# Cone-constrained quadratic optimization
# ---------------------------------------------------------------------------

def _transform(cone: ConeSpec):
    """Reduce a cone to full space or orthant via a generator matrix."""
    if cone.kind == CONE_FULL:
        return CONE_FULL, None
    if cone.kind == CONE_ORTHANT:
        return CONE_ORTHANT, None
    if cone.kind == CONE_RAYS:
        return CONE_ORTHANT, cone.rays  # v = rays.T @ a, a >= 0
    raise ConeUnsupported(f"no solver registered for cone kind {cone.kind!r}")


def _free_sets(kind: str, dim: int):
    if kind == CONE_FULL:
        return [tuple(range(dim))]
    if dim > _ENUM_LIMIT:
        raise ConeUnsupported(f"orthant dimension {dim} beyond enumeration limit")
    idx = range(dim)
    return [s for r in range(dim + 1) for s in itertools.combinations(idx, r)]


def _solve_free(M: np.ndarray, rhs: np.ndarray):
    if M.shape[0] == 0:
        return rhs
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(M, rhs, rcond=None)[0]


def _clip_zero(v: np.ndarray) -> np.ndarray:
    v = np.where(np.abs(v) < _ZERO_CLIP, 0.0, v)
    return np.maximum(v, 0.0)


def cone_extremum(Q: np.ndarray, q: np.ndarray, cone: ConeSpec, sense: int):
    """Exact extremum of v'Qv + 2q'v over a closed convex cone.

    ``sense`` is +1 to maximize (Q negative definite on the cone span) or -1
    to minimize (Q positive definite).  Returns (argopt, value); ties are
    broken by the smallest-norm optimizer.
    """
    kind, gen = _transform(cone)
    if gen is not None:
        Qw = gen @ Q @ gen.T
        qw = gen @ q
    else:
        Qw, qw = Q, q
    dim = qw.shape[0]
    scale = 1.0 + float(np.abs(Qw).max()) + float(np.abs(qw).max())
    best = None
    for free in _free_sets(kind, dim):
        f = list(free)
        v = np.zeros(dim)
        v[f] = _solve_free(Qw[np.ix_(f, f)], -qw[f])
        if kind == CONE_ORTHANT and np.any(v[f] < -_KKT_TOL * scale):
            continue
        grad = 2.0 * (Qw @ v + qw)
        if np.max(np.abs(grad[f]), initial=0.0) > 1e-7 * scale:
            continue  # singular reduced system without stationarity
        if kind == CONE_ORTHANT:
            act = [j for j in range(dim) if j not in free]
            if sense > 0 and np.any(grad[act] > _KKT_TOL * scale):
                continue
            if sense < 0 and np.any(grad[act] < -_KKT_TOL * scale):
                continue
        if kind == CONE_ORTHANT:
            v = _clip_zero(v)
        val = float(v @ Qw @ v + 2.0 * qw @ v)
        nrm = float(v @ v)
        if best is None or sense * (val - best[0]) > 1e-12 * scale or (
                abs(val - best[0]) <= 1e-12 * scale and nrm < best[1] - 1e-15):
            best = (val, nrm, v)
    if best is None:
        raise SingularBlock("cone subproblem admits no KKT-consistent point")
    v = best[2] if gen is None else gen.T @ best[2]
    return v, best[0]


def cone_max(Q, q, cone):
    return cone_extremum(Q, q, cone, +1)


def cone_min(Q, q, cone):
    return cone_extremum(Q, q, cone, -1)


def saddle_qp(q11: np.ndarray, q12: np.ndarray, q22: np.ndarray,
              c1: np.ndarray, c2: np.ndarray, cone1: ConeSpec, cone2: ConeSpec):
    """Saddle point of v1'Q11v1 + 2v1'Q12v2 + v2'Q22v2 + 2c1'v1 + 2c2'v2.

    Player 1 maximizes over cone1, player 2 minimizes over cone2.  Solved by
    joint active-set enumeration of the KKT system; the strictly
    concave-convex structure makes the consistent pattern unique.
    """
    kind1, g1 = _transform(cone1)
    kind2, g2 = _transform(cone2)
    if g1 is not None:
        q11 = g1 @ q11 @ g1.T
        c1 = g1 @ c1
        q12 = g1 @ q12
    if g2 is not None:
        q22 = g2 @ q22 @ g2.T
        c2 = g2 @ c2
        q12 = q12 @ g2.T
    d1, d2 = c1.shape[0], c2.shape[0]
    scale = 1.0 + max(float(np.abs(q11).max()), float(np.abs(q22).max()),
                      float(np.abs(q12).max(initial=0.0)),
                      float(np.abs(c1).max()), float(np.abs(c2).max()))
    best = None
    for f1 in _free_sets(kind1, d1):
        for f2 in _free_sets(kind2, d2):
            a, b = list(f1), list(f2)
            M = np.block([
                [q11[np.ix_(a, a)], q12[np.ix_(a, b)]],
                [q12[np.ix_(a, b)].T, q22[np.ix_(b, b)]],
            ]) if a or b else np.zeros((0, 0))
            rhs = -np.concatenate([c1[a], c2[b]])
            sol = _solve_free(M, rhs)
            v1 = np.zeros(d1)
            v2 = np.zeros(d2)
            v1[a] = sol[:len(a)]
            v2[b] = sol[len(a):]
            if kind1 == CONE_ORTHANT and np.any(v1[a] < -_KKT_TOL * scale):
                continue
            if kind2 == CONE_ORTHANT and np.any(v2[b] < -_KKT_TOL * scale):
                continue
            g1v = 2.0 * (q11 @ v1 + q12 @ v2 + c1)
            g2v = 2.0 * (q22 @ v2 + q12.T @ v1 + c2)
            if max(np.max(np.abs(g1v[a]), initial=0.0),
                   np.max(np.abs(g2v[b]), initial=0.0)) > 1e-7 * scale:
                continue
            if kind1 == CONE_ORTHANT:
                act = [j for j in range(d1) if j not in f1]
                if np.any(g1v[act] > _KKT_TOL * scale):
                    continue
                v1 = _clip_zero(v1)
            if kind2 == CONE_ORTHANT:
                act = [j for j in range(d2) if j not in f2]
                if np.any(g2v[act] < -_KKT_TOL * scale):
                    continue
                v2 = _clip_zero(v2)
            nrm = float(v1 @ v1 + v2 @ v2)
            if best is None or nrm < best[0] - 1e-15:
                best = (nrm, v1, v2)
    if best is None:
        raise SingularBlock("saddle subproblem admits no KKT-consistent point")
    v1 = best[1] if g1 is None else g1.T @ best[1]
    v2 = best[2] if g2 is None else g2.T @ best[2]
    return v1, v2


def _saddle_value(r11, r12, r22, c1, c2, v1, v2) -> float:
    return float(v1 @ r11 @ v1 + 2.0 * v1 @ r12 @ v2 + v2 @ r22 @ v2
                 + 2.0 * c1 @ v1 + 2.0 * c2 @ v2)


@dataclass(frozen=True)
class ConstrainedHamiltonianEval:
    """Cone-constrained Hamiltonian values, optimizers and best responses.

    ``f11/f12`` are the inner maxima over player 1 and ``f21/f22`` the inner
    minima over player 2, each evaluated at the companion outer optimizer.
    ``betahat``s are the inner best responses at those optimizers; responses
    at arbitrary opponent values come from :func:`best_response`.
    """

    f11: float
    f12: float
    f21: float
    f22: float
    htilde11: float
    htilde12: float
    htilde21: float
    htilde22: float
    htilde1: float
    htilde2: float
    vhat11: np.ndarray
    vhat12: np.ndarray
    vhat21: np.ndarray
    vhat22: np.ndarray
    betahat11: np.ndarray
    betahat12: np.ndarray
    betahat21: np.ndarray
    betahat22: np.ndarray
    search_radius: float


def admissible_radius(lam_norm: float, constants: AssumptionReport) -> float:
    """Certified localization radius for the cone optimizers, doubled for slack."""
    if constants.epsilon <= 0.0:
        return np.inf
    c0 = 2.0 * max(constants.epsbar * np.sqrt(constants.c3), np.sqrt(constants.cbar2))
    s = c0 * (1.0 + lam_norm)
    r = (s + np.sqrt(s * s + 8.0 * (constants.c3 * constants.epsbar ** 2
                                    + constants.cbar2 * lam_norm ** 2))) / (2.0 * constants.epsilon)
    return 2.0 * r


def best_response(player: int, sign: int, v_op: np.ndarray, P: float,
                  lam: np.ndarray, co: Coeffs, cone: ConeSpec):
    """Inner best response of one player given the other's scaled control.

    ``player`` 1 maximizes, 2 minimizes; ``sign`` +1/-1 selects the branch
    built from +C-hat or -C-hat linear terms.  Returns (argopt, value).
    """
    r11, r12, r22, chat1, chat2 = _blocks(P, lam, co)
    if player == 1:
        return cone_max(r11, r12 @ v_op + sign * chat1, cone)
    return cone_min(r22, r12.T @ v_op + sign * chat2, cone)


def constrained_eval(P: float, lam: np.ndarray, cones: tuple, co: Coeffs,
                     constants: Optional[AssumptionReport] = None,
                     gap_tol: float = 1e-8) -> ConstrainedHamiltonianEval:
    """Evaluate the cone-constrained Hamiltonians and their optimizers.

    The sup-inf and inf-sup orderings are evaluated through their own nested
    compositions and certified equal within ``gap_tol``; a larger gap means
    the optimizer failed and raises ``MinimaxGapExceeded``.
    """
    n = co.C.shape[0]
    lam = np.zeros(n) if lam is None else np.asarray(lam, dtype=float)
    cone1, cone2 = cones
    r11, r12, r22, chat1, chat2 = _blocks(P, lam, co)
    _check_definite(r11, r22, constants.epsilon if constants is not None else None)

    out = {}
    for sign, tag in ((+1, "pos"), (-1, "neg")):
        v1, v2 = saddle_qp(r11, r12, r22, sign * chat1, sign * chat2, cone1, cone2)
        beta2, f2_at_v1 = cone_min(r22, r12.T @ v1 + sign * chat2, cone2)
        h_supinf = float(v1 @ r11 @ v1 + 2.0 * sign * chat1 @ v1) + f2_at_v1
        beta1, f1_at_v2 = cone_max(r11, r12 @ v2 + sign * chat1, cone1)
        h_infsup = float(v2 @ r22 @ v2 + 2.0 * sign * chat2 @ v2) + f1_at_v2
        gap = abs(h_supinf - h_infsup)
        if gap > gap_tol * max(1.0, abs(h_supinf), abs(h_infsup)):
            raise MinimaxGapExceeded(
                f"sup-inf {h_supinf:.12g} vs inf-sup {h_infsup:.12g} ({tag} branch)")
        out[tag] = (v1, v2, beta1, beta2, f1_at_v2, f2_at_v1, h_supinf, h_infsup)

    vp1, vp2, bp1, bp2, f11, f21, h11, h21 = out["pos"]
    vn1, vn2, bn1, bn2, f12, f22, h12, h22 = out["neg"]
    radius = admissible_radius(float(np.linalg.norm(lam)), constants) if constants else np.inf
    return ConstrainedHamiltonianEval(
        f11=f11, f12=f12, f21=f21, f22=f22,
        htilde11=h11, htilde12=h12, htilde21=h21, htilde22=h22,
        htilde1=0.5 * (h11 + h21), htilde2=0.5 * (h12 + h22),
        vhat11=vp1, vhat12=vn1, vhat21=vp2, vhat22=vn2,
        betahat11=bp1, betahat12=bn1, betahat21=bp2, betahat22=bn2,
        search_radius=radius,
    )


def htilde_pair(P: float, lam: np.ndarray, cones: tuple, co: Coeffs):
    """Fast (H~1, H~2) evaluation used inside the constrained solvers."""
    n = co.C.shape[0]
    lam = np.zeros(n) if lam is None else np.asarray(lam, dtype=float)
    cone1, cone2 = cones
    r11, r12, r22, chat1, chat2 = _blocks(P, lam, co)
    vals = []
    for sign in (+1, -1):
        v1, v2 = saddle_qp(r11, r12, r22, sign * chat1, sign * chat2, cone1, cone2)
        vals.append(_saddle_value(r11, r12, r22, sign * chat1, sign * chat2, v1, v2))
    return vals[0], vals[1]
