"""Game specification: dynamics, cost, regimes, cones, and derived constants.

The model types are immutable after construction and safe to share across
workers.  Coefficients are stored per regime on a time axis of length 1
(constant in time) or ``N + 1`` (one value per grid node, piecewise constant
between nodes).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ConeUnsupported, DimensionMismatch, NonPositiveScale

MODE_DETERMINISTIC = "deterministic"
MODE_FACTOR = "factor"

CONE_FULL = "full"
CONE_ORTHANT = "orthant"
CONE_RAYS = "rays"

_SYM_TOL = 1e-12
_ROW_TOL = 1e-12


def em1x(y: float) -> float:
    """(e^y - 1)/y with the removable singularity at y = 0 filled in."""
    y = float(y)
    if abs(y) < 1e-8:
        return 1.0 + y / 2.0 + y * y / 6.0
    return np.expm1(y) / y


def _as_time_table(arr, tail: tuple, name: str) -> np.ndarray:
    """Normalize a coefficient to shape (nt, l, *tail); nt in {1, N+1}."""
    a = np.array(arr, dtype=float, copy=True)
    if tail and a.shape[-len(tail):] != tail:
        raise DimensionMismatch(f"{name}: trailing shape {a.shape} != {tail}")
    want = len(tail) + 2
    if a.ndim == want - 1:
        a = a[None]
    if a.ndim != want:
        raise DimensionMismatch(f"{name}: expected {want - 1} or {want} axes, got {a.ndim}")
    if not np.all(np.isfinite(a)):
        raise DimensionMismatch(f"{name}: non-finite entries")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RegimeGenerator:
    """Rate matrix of the continuous-time regime chain."""

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float, copy=True)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
            raise DimensionMismatch("rate matrix must be square with l >= 1")
        off = q.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0.0):
            raise DimensionMismatch("off-diagonal rates must be nonnegative")
        if np.any(np.abs(q.sum(axis=1)) > _ROW_TOL * max(1.0, np.abs(q).max())):
            raise DimensionMismatch("rate matrix rows must sum to zero")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def l(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class ConeSpec:
    """Closed convex cone constraint for one player's control."""

    kind: str
    dim: int
    rays: Optional[np.ndarray] = None  # (n_rays, dim), unit rows, for kind="rays"

    def __post_init__(self):
        if self.kind not in (CONE_FULL, CONE_ORTHANT, CONE_RAYS):
            raise ConeUnsupported(f"unknown cone kind {self.kind!r}")
        if self.dim < 1:
            raise DimensionMismatch("cone dimension must be >= 1")
        if self.kind == CONE_RAYS:
            r = np.asarray(self.rays, dtype=float)
            if r.ndim != 2 or r.shape[1] != self.dim or r.shape[0] < 1:
                raise DimensionMismatch("rays must have shape (n_rays, dim)")
            norms = np.linalg.norm(r, axis=1)
            if np.any(norms < 1e-12):
                raise DimensionMismatch("rays must be nonzero")
            r = r / norms[:, None]
            r.setflags(write=False)
            object.__setattr__(self, "rays", r)
        elif self.rays is not None:
            raise DimensionMismatch(f"rays given for cone kind {self.kind!r}")

    @property
    def is_full(self) -> bool:
        return self.kind == CONE_FULL

    def project(self, v: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the cone."""
        v = np.asarray(v, dtype=float)
        if self.kind == CONE_FULL:
            return v
        if self.kind == CONE_ORTHANT:
            return np.maximum(v, 0.0)
        # Nonnegative combination of rays: enumerate active subsets (few rays).
        g = self.rays.T  # (dim, n_rays)
        k = g.shape[1]
        best, best_d = np.zeros(self.dim), float(np.dot(v, v))
        for mask in range(1, 1 << k):
            idx = [j for j in range(k) if mask >> j & 1]
            gs = g[:, idx]
            lam, *_ = np.linalg.lstsq(gs, v, rcond=None)
            if np.any(lam < -1e-12):
                continue
            cand = gs @ np.maximum(lam, 0.0)
            d = float(np.dot(v - cand, v - cand))
            if d < best_d - 1e-15:
                best, best_d = cand, d
        return best

    def distance(self, v: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(v, dtype=float) - self.project(v)))

    def contains(self, v: np.ndarray, tol: float = 1e-9) -> bool:
        return self.distance(v) <= tol


def full_cone(dim: int) -> ConeSpec:
    return ConeSpec(CONE_FULL, dim)


def orthant_cone(dim: int) -> ConeSpec:
    return ConeSpec(CONE_ORTHANT, dim)


@dataclass(frozen=True)
class SystemCoefficients:
    """Per-regime dynamics tables for the scalar controlled state.

    In ``factor`` mode the tables act as the declared essential-sup envelope
    used for constant computation, and ``factor_fn(t, i, y)`` supplies the
    actual coefficient values given the factor state ``y`` (the running
    Brownian value, one row per sample path).  ``factor_fn`` must return a
    mapping with keys among the table names; missing keys fall back to the
    table value.
    """

    n: int
    m1: int
    m2: int
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    b: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    sigma: np.ndarray
    mode: str = MODE_DETERMINISTIC
    factor_fn: Optional[Callable] = None

    def __post_init__(self):
        n, m1, m2 = self.n, self.m1, self.m2
        if min(n, m1, m2) < 1:
            raise DimensionMismatch("n, m1, m2 must be >= 1")
        norm = {
            "A": ((), self.A), "b": ((), self.b),
            "B1": ((m1,), self.B1), "B2": ((m2,), self.B2),
            "C": ((n,), self.C), "sigma": ((n,), self.sigma),
            "D1": ((n, m1), self.D1), "D2": ((n, m2), self.D2),
        }
        l = None
        for name, (tail, arr) in norm.items():
            a = _as_time_table(arr, tail, name)
            if l is None:
                l = a.shape[1]
            elif a.shape[1] != l:
                raise DimensionMismatch(f"{name}: regime count {a.shape[1]} != {l}")
            object.__setattr__(self, name, a)
        if self.mode not in (MODE_DETERMINISTIC, MODE_FACTOR):
            raise DimensionMismatch(f"unknown coefficient mode {self.mode!r}")
        if self.mode == MODE_FACTOR and self.factor_fn is None:
            raise DimensionMismatch("factor mode requires factor_fn")

    @property
    def l(self) -> int:
        return self.A.shape[1]

    @property
    def nt(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class CostCoefficients:
    """Quadratic running and terminal cost tables."""

    K: np.ndarray
    R11: np.ndarray
    R12: np.ndarray
    R22: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        K = _as_time_table(self.K, (), "K")
        l = K.shape[1]
        m1 = np.asarray(self.R11).shape[-1]
        m2 = np.asarray(self.R22).shape[-1]
        R11 = _as_time_table(self.R11, (m1, m1), "R11")
        R12 = _as_time_table(self.R12, (m1, m2), "R12")
        R22 = _as_time_table(self.R22, (m2, m2), "R22")
        G = np.array(self.G, dtype=float, copy=True)
        if G.shape != (l,):
            raise DimensionMismatch(f"G must have shape ({l},), got {G.shape}")
        for name, R in (("R11", R11), ("R22", R22)):
            if np.max(np.abs(R - R.swapaxes(-1, -2))) > _SYM_TOL * max(1.0, np.abs(R).max()):
                raise DimensionMismatch(f"{name} must be symmetric")
        for name, a in (("K", K), ("R11", R11), ("R12", R12), ("R22", R22), ("G", G)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def l(self) -> int:
        return self.K.shape[1]

    @property
    def nt(self) -> int:
        return max(self.K.shape[0], self.R11.shape[0], self.R12.shape[0],
                   self.R22.shape[0])

    @property
    def m1(self) -> int:
        return self.R11.shape[-1]

    @property
    def m2(self) -> int:
        return self.R22.shape[-1]


class Coeffs(NamedTuple):
    """All coefficient values at one (node, regime) point."""

    A: float
    B1: np.ndarray
    B2: np.ndarray
    b: float
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    sigma: np.ndarray
    K: float
    R11: np.ndarray
    R12: np.ndarray
    R22: np.ndarray


@dataclass(frozen=True)
class GameModel:
    """Complete zero-sum game instance on a declared time grid."""

    T: float
    N: int
    gen: RegimeGenerator
    sys: SystemCoefficients
    cost: CostCoefficients
    x0: float
    i0: int
    cones: tuple = None
    constant_floors: Optional[dict] = None

    def __post_init__(self):
        if not (self.T > 0.0):
            raise DimensionMismatch("horizon T must be positive")
        if self.N < 2:
            raise DimensionMismatch("grid node count N must be >= 2")
        l = self.gen.l
        if self.sys.l != l or self.cost.l != l:
            raise DimensionMismatch("regime counts of generator, dynamics and cost disagree")
        if self.cost.m1 != self.sys.m1 or self.cost.m2 != self.sys.m2:
            raise DimensionMismatch("control dimensions of dynamics and cost disagree")
        for tab in (self.sys, self.cost):
            if tab.nt not in (1, self.N + 1):
                raise DimensionMismatch(
                    f"time tables must have 1 or N+1={self.N + 1} rows, got {tab.nt}")
        if not (0 <= self.i0 < l):
            raise DimensionMismatch(f"initial regime {self.i0} out of range")
        cones = self.cones
        if cones is None:
            cones = (full_cone(self.sys.m1), full_cone(self.sys.m2))
        c1, c2 = cones
        if c1.dim != self.sys.m1 or c2.dim != self.sys.m2:
            raise DimensionMismatch("cone dimensions disagree with control dimensions")
        object.__setattr__(self, "cones", (c1, c2))
        if not (c1.is_full and c2.is_full):
            if not self.is_homogeneous:
                raise DimensionMismatch(
                    "cone-constrained games require homogeneous dynamics (b = 0, sigma = 0)")

    @property
    def l(self) -> int:
        return self.gen.l

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def is_homogeneous(self) -> bool:
        return bool(np.all(self.sys.b == 0.0) and np.all(self.sys.sigma == 0.0))

    @property
    def is_constrained(self) -> bool:
        return not (self.cones[0].is_full and self.cones[1].is_full)

    def table_index(self, t: float) -> int:
        """Row of the coefficient tables governing time t (left piecewise-constant)."""
        nt = max(self.sys.nt, self.cost.nt)
        if nt == 1:
            return 0
        k = int(np.floor(t / self.dt + 1e-9))
        return min(max(k, 0), nt - 1)

    def coeffs_at(self, k: int, i: int) -> Coeffs:
        """Coefficient bundle at table row k (clamped) and regime i."""
        s, c = self.sys, self.cost
        ks = min(k, s.nt - 1)
        kc = min(k, c.nt - 1)
        return Coeffs(
            A=float(s.A[ks, i]), B1=s.B1[ks, i], B2=s.B2[ks, i], b=float(s.b[ks, i]),
            C=s.C[ks, i], D1=s.D1[ks, i], D2=s.D2[ks, i], sigma=s.sigma[ks, i],
            K=float(c.K[kc, i]), R11=c.R11[kc, i], R12=c.R12[kc, i], R22=c.R22[kc, i],
        )


@dataclass(frozen=True)
class AssumptionReport:
    """Derived essential-sup constants and standing-assumption flags.

    ``epsilon`` and ``epsbar`` follow the closed formulas

        epsilon = 8 c3 (e^{c1 l T} - 1) [Kbar (e^{c1 l T} - 1)
                  + Gbar c1 l e^{c1 l T}] / (c1 l)^2,
        epsbar  = c1 l epsilon / (4 c3 (e^{c1 l T} - 1)),

    evaluated through their series limits when c1 l or c3 degenerate.
    """

    c1: float
    cbar2: float
    cunder2: float
    c3: float
    kbar: float
    gbar: float
    epsilon: float
    epsbar: float
    assumption1_ok: bool
    assumption2_ok: bool
    assumption3_ok: bool
    margins: dict
    l: int
    horizon: float

    @property
    def all_ok(self) -> bool:
        return self.assumption1_ok and self.assumption2_ok and self.assumption3_ok


def compute_constants(model: GameModel) -> AssumptionReport:
    """Scan all grid nodes and regimes for the bound constants and flags.

    In factor mode the scan runs over the declared envelope tables; the
    caller is responsible for factor maps that respect them.
    """
    s, c, q = model.sys, model.cost, model.gen.q
    two_a_cc = 2.0 * s.A + np.einsum("tln,tln->tl", s.C, s.C)
    c1 = float(two_a_cc.max() + q.max())
    d1td1 = np.einsum("tlnm,tlnk->tlmk", s.D1, s.D1)
    d2td2 = np.einsum("tlnm,tlnk->tlmk", s.D2, s.D2)
    eig1 = np.linalg.eigvalsh(d1td1)
    eig2 = np.linalg.eigvalsh(d2td2)
    cbar2 = float(max(eig1.max(), eig2.max()))
    cunder2 = float(min(eig1.min(), eig2.min()))
    e1 = s.B1 + np.einsum("tlnm,tln->tlm", s.D1, s.C)
    e2 = s.B2 + np.einsum("tlnm,tln->tlm", s.D2, s.C)
    c3 = float(max(np.einsum("tlm,tlm->tl", e1, e1).max(),
                   np.einsum("tlm,tlm->tl", e2, e2).max()))
    kbar = float(np.abs(c.K).max())
    gbar = float(np.abs(c.G).max())

    floors = model.constant_floors or {}
    c1 = max(c1, floors.get("c1", 0.0), 0.0)
    cbar2 = max(cbar2, floors.get("cbar2", 0.0))
    c3 = max(c3, floors.get("c3", 0.0))
    kbar = max(kbar, floors.get("kbar", 0.0))
    gbar = max(gbar, floors.get("gbar", 0.0))

    x = c1 * model.l
    growth = em1x(x * model.T)  # (e^{x T} - 1) / (x T)
    expxt = np.exp(x * model.T)
    epsbar = 2.0 * (kbar * model.T * growth + gbar * expxt)
    epsilon = 4.0 * c3 * model.T * growth * epsbar if c3 > 0.0 else 0.0

    lam_r11 = np.linalg.eigvalsh(c.R11)
    lam_r22 = np.linalg.eigvalsh(c.R22)
    level = epsilon + epsbar * cbar2
    margin2 = float(min(-level - lam_r11.max(), lam_r22.min() - level))
    margin3 = epsilon - 2.0 * cbar2
    margins = {
        "uniform_ellipticity": cunder2,
        "cost_definiteness": margin2,
        "scale_gap": margin3,
    }
    return AssumptionReport(
        c1=c1, cbar2=cbar2, cunder2=cunder2, c3=c3, kbar=kbar, gbar=gbar,
        epsilon=float(epsilon), epsbar=float(epsbar),
        assumption1_ok=cunder2 > 0.0,
        assumption2_ok=margin2 >= 0.0,
        assumption3_ok=margin3 > 0.0,
        margins=margins, l=model.l, horizon=model.T,
    )


def scale_cost(model: GameModel, ctilde: float) -> GameModel:
    """Rescale every cost weight by ctilde > 0; dynamics are untouched."""
    if not (ctilde > 0.0):
        raise NonPositiveScale(f"scale must be positive, got {ctilde}")
    c = model.cost
    scaled = CostCoefficients(
        K=c.K * ctilde, R11=c.R11 * ctilde, R12=c.R12 * ctilde,
        R22=c.R22 * ctilde, G=c.G * ctilde,
    )
    return dataclasses.replace(model, cost=scaled)
