"""Plain columnar text output: one header line, fixed column order,
floats at 17 significant digits for lossless reproduction."""

from __future__ import annotations

import numpy as np

from .sre import PhiSolution, SRESolution

_FLOAT_FMT = "%.17g"


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _FLOAT_FMT % float(v)


def format_table(header, rows) -> str:
    lines = [" ".join(header)]
    for row in rows:
        lines.append(" ".join(_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def write_table(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_table(header, rows))


def solution_rows(sre: SRESolution, phi: PhiSolution | None = None):
    """(t, regime, P, Lambda..., phi, Delta..., bound flags) rows."""
    grid = sre.grid
    n = sre.Lam.shape[2]
    header = ["t", "regime", "P"] + [f"Lambda{j+1}" for j in range(n)] + ["phi"] \
        + [f"Delta{j+1}" for j in range(n)] + ["bound_ok", "envelope_ok"]
    t = grid.nodes()
    rows = []
    l = sre.P.shape[1]
    for k in range(grid.N + 1):
        for i in range(l):
            row = [t[k], i, sre.P[k, i]]
            row += list(sre.Lam[k, i])
            row.append(phi.phi[k, i] if phi is not None else 0.0)
            row += list(phi.Delta[k, i]) if phi is not None else [0.0] * n
            row += [sre.bound_ok[k, i], sre.envelope_ok[k, i]]
            rows.append(row)
    return header, rows


def trace_rows(grid, regimes, X, U1, U2):
    """(t, regime, X, u1..., u2...) rows for a handful of sample paths."""
    m1 = U1.shape[2]
    m2 = U2.shape[2]
    header = ["path", "t", "regime", "X"] + [f"u1_{j+1}" for j in range(m1)] \
        + [f"u2_{j+1}" for j in range(m2)]
    t = grid.nodes()
    rows = []
    for p in range(X.shape[0]):
        for k in range(grid.N + 1):
            rows.append([p, t[k], int(regimes[p, k]), X[p, k]]
                        + list(U1[p, k]) + list(U2[p, k]))
    return header, rows


def envelope_rows(env, grid):
    header = ["t", "P_lower", "P_upper"]
    t = grid.nodes()
    pb = env.pbar(t)
    return header, [[t[k], -pb[k], pb[k]] for k in range(len(t))]
