"""Command-line entry point.

Commands:
  validate   check standing assumptions / market conditions
  solve-sre  solve the Riccati field(s) and write solution tables
  solve-game add the feedback laws, affine term and game value
  simulate   Monte Carlo objective under the optimal pair, plus path traces
  verify     saddle-point, envelope and equivalence suites
  portfolio  the full market pipeline
  bounds     emit the comparison envelope

Exit codes: 0 on success; each error class carries a fixed code (see
errors.EXIT_CODES); validation failures exit 2.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np

from . import engine, portfolio as pf, sre, tables
from .config import ScenarioConfig, load_config, serialize_config
from .errors import SregameError
from .model import compute_constants
from .sre import TimeGrid


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sregame",
                                description="Regime-switching zero-sum LQ game solver")
    p.add_argument("command", choices=["validate", "solve-sre", "solve-game",
                                       "simulate", "verify", "portfolio", "bounds"])
    p.add_argument("--config", required=True, help="scenario TOML file")
    p.add_argument("--seed", type=int, default=None, help="Monte Carlo seed override")
    p.add_argument("--paths", type=int, default=None, help="path count override")
    p.add_argument("--grid", type=int, default=None, help="grid step count override")
    p.add_argument("--workers", type=int, default=1,
                   help="concurrency cap (1 = bitwise reproducible)")
    p.add_argument("--out", default=None, help="output directory override")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.paths is not None:
            cfg.paths = args.paths
        if args.out is not None:
            cfg.out_dir = args.out
        if args.workers < 1:
            raise SregameError("workers must be >= 1")
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        handler = _COMMANDS[args.command]
        return handler(cfg, args, out)
    except SregameError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        traceback.print_exc()
        return 1


def _grid_for(cfg: ScenarioConfig, args) -> TimeGrid:
    if cfg.kind == "game":
        T, N = cfg.model.T, cfg.model.N
    else:
        T, N = cfg.market.T, cfg.market.N
    return TimeGrid(T, args.grid if args.grid is not None else N)


def _write(out: Path, name: str, text: str):
    path = out / name
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


def _cmd_validate(cfg, args, out) -> int:
    lines = [f"scenario {cfg.name}"]
    ok = True
    if cfg.kind == "game":
        rep = compute_constants(cfg.model)
        lines += [
            f"c1 {rep.c1:.17g}", f"cbar2 {rep.cbar2:.17g}",
            f"cunder2 {rep.cunder2:.17g}", f"c3 {rep.c3:.17g}",
            f"Kbar {rep.kbar:.17g}", f"Gbar {rep.gbar:.17g}",
            f"epsilon {rep.epsilon:.17g}", f"epsbar {rep.epsbar:.17g}",
        ]
        for name, flag in (("uniform_ellipticity", rep.assumption1_ok),
                           ("cost_definiteness", rep.assumption2_ok),
                           ("scale_gap", rep.assumption3_ok)):
            lines.append(f"assumption {name}: {'pass' if flag else 'FAIL'} "
                         f"(margin {rep.margins[name]:.6g})")
        if not rep.assumption2_ok:
            lam11 = float(np.linalg.eigvalsh(cfg.model.cost.R11).max())
            level = rep.epsilon + rep.epsbar * rep.cbar2
            side = "R11" if lam11 > -level else "R22"
            lines.append(f"failing weight matrix: {side}")
        ok = rep.all_ok
    else:
        cons = pf.market_constants(cfg.market)
        lines += [
            f"qtilde {cons.qtilde:.17g}", f"rtilde {cons.rtilde:.17g}",
            f"mutilde {cons.mutilde:.17g}", f"sigbar {cons.sigbar:.17g}",
            f"sigunder {cons.sigunder:.17g}",
            f"eps1 {cons.eps1:.17g}", f"eps2 {cons.eps2:.17g}",
        ]
        flags = [("volatility_floor", cons.condition1_ok),
                 ("risk_weight_level", cons.condition2_ok),
                 ("volatility_gap", cons.condition3_ok)]
        if cfg.market.constraint == pf.NO_SHORT_BOTH:
            flags.append(("uncorrelated_stocks", cons.condition4_ok))
        for name, flag in flags:
            lines.append(f"condition {name}: {'pass' if flag else 'FAIL'}")
        ok = all(f for _, f in flags)
    lines.append(f"result {'pass' if ok else 'fail'}")
    _write(out, f"{cfg.name}_validate.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if ok else 2


def _solve_game_fields(cfg, args):
    model = cfg.model
    grid = _grid_for(cfg, args)
    if model.is_constrained:
        pos, neg = sre.solve_sre_constrained(model, grid)
        return {"sre_pos": pos, "sre_neg": neg}, None
    sol = sre.solve_sre(model, grid)
    phi = sre.solve_linear_bsde(model, sol, grid)
    return {"sre": sol}, phi


def _cmd_solve_sre(cfg, args, out) -> int:
    if cfg.kind == "market":
        return _cmd_portfolio(cfg, args, out)
    fields, phi = _solve_game_fields(cfg, args)
    for name, sol in fields.items():
        header, rows = tables.solution_rows(sol, phi)
        _write(out, f"{cfg.name}_{name}.txt", tables.format_table(header, rows))
    return 0


def _cmd_solve_game(cfg, args, out) -> int:
    if cfg.kind == "market":
        return _cmd_portfolio(cfg, args, out)
    model = cfg.model
    fields, phi = _solve_game_fields(cfg, args)
    for name, sol in fields.items():
        header, rows = tables.solution_rows(sol, phi)
        _write(out, f"{cfg.name}_{name}.txt", tables.format_table(header, rows))
    if model.is_constrained:
        pos, neg = fields["sre_pos"], fields["sre_neg"]
        engine.build_feedback(model, pos, None, "constrained1", sre_neg=neg)
        value = engine.value_formula(model, pos, None, sre_neg=neg)
    else:
        engine.build_feedback(model, fields["sre"], phi, "unconstrained1")
        value = engine.value_formula(model, fields["sre"], phi)
    _write(out, f"{cfg.name}_value.txt",
           f"scenario {cfg.name}\nvalue {value:.17g}\n")
    print(f"value {value:.17g}")
    return 0


def _laws_for(cfg, args):
    if cfg.kind == "market":
        sol = pf.solve_portfolio(cfg.market, _grid_for(cfg, args))
        return sol.game, sol.law1, sol.law2, sol.value
    model = cfg.model
    fields, phi = _solve_game_fields(cfg, args)
    if model.is_constrained:
        pos, neg = fields["sre_pos"], fields["sre_neg"]
        law1 = engine.build_feedback(model, pos, None, "constrained1", sre_neg=neg)
        law2 = engine.build_feedback(model, pos, None, "constrained2", sre_neg=neg)
        value = engine.value_formula(model, pos, None, sre_neg=neg)
    else:
        law1 = engine.build_feedback(model, fields["sre"], phi, "unconstrained1")
        law2 = engine.build_feedback(model, fields["sre"], phi, "unconstrained2")
        value = engine.value_formula(model, fields["sre"], phi)
    return model, law1, law2, value


def _cmd_simulate(cfg, args, out) -> int:
    model, law1, law2, value = _laws_for(cfg, args)
    grid = law1.grid
    bundle = engine.sample_paths(model, grid, cfg.paths, cfg.seed)
    jhat, se = engine.estimate_objective(model, law1, law1, bundle)
    n_trace = min(cfg.paths, 20)
    small = engine.sample_paths(model, grid, n_trace, cfg.seed)
    X, U1, U2 = engine.simulate_with_controls(model, law1, law1, small)
    header, rows = tables.trace_rows(grid, small.regimes, X, U1, U2)
    _write(out, f"{cfg.name}_traces.txt", tables.format_table(header, rows))
    report = (f"scenario {cfg.name}\npaths {cfg.paths}\nseed {cfg.seed}\n"
              f"objective {jhat:.17g}\nstderr {se:.17g}\nvalue {value:.17g}\n")
    _write(out, f"{cfg.name}_simulate.txt", report)
    print(report.strip())
    return 0


def _cmd_verify(cfg, args, out) -> int:
    if cfg.kind == "market":
        return _verify_market(cfg, args, out)
    model = cfg.model
    grid = _grid_for(cfg, args)
    lines = [f"scenario {cfg.name}"]
    ok = True
    if model.is_constrained:
        pos, neg = sre.solve_sre_constrained(model, grid)
        flag = bool(pos.bound_ok.all() and neg.bound_ok.all()
                    and pos.envelope_ok.all() and neg.envelope_ok.all())
        lines.append(f"envelope containment: {'pass' if flag else 'FAIL'}")
        ok &= flag
        value = engine.value_formula(model, pos, None, sre_neg=neg)
        lines.append(f"value {value:.17g}")
    else:
        sol = sre.solve_sre(model, grid)
        phi = sre.solve_linear_bsde(model, sol, grid)
        flag = bool(sol.bound_ok.all() and sol.envelope_ok.all())
        lines.append(f"envelope containment: {'pass' if flag else 'FAIL'}")
        ok &= flag
        if model.is_homogeneous:
            # full-space equivalence of the constrained machinery
            pos, neg = sre.solve_sre_constrained(model, grid)
            dev = max(float(np.abs(pos.P - sol.P).max()),
                      float(np.abs(neg.P - sol.P).max()))
            flag = dev <= 1e-8
            lines.append(f"full-space equivalence: {'pass' if flag else 'FAIL'} "
                         f"(max deviation {dev:.3e})")
            ok &= flag
        bundle = engine.sample_paths(model, grid, cfg.paths, cfg.seed)
        perts = [engine.Perturbation("u1", s) for s in (cfg.perturb_u1 or [0.25, -0.4])]
        perts += [engine.Perturbation("beta2", s) for s in (cfg.perturb_beta2 or [0.3])]
        report = engine.saddle_check(model, sol, phi, bundle, perts,
                                     soft=cfg.soft_sigma, hard=cfg.hard_sigma)
        lines.append(report.as_text().rstrip())
        ok &= report.all_soft
    lines.append(f"result {'pass' if ok else 'fail'}")
    _write(out, f"{cfg.name}_verify.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if ok else 2


def _verify_market(cfg, args, out) -> int:
    market = cfg.market
    grid = _grid_for(cfg, args)
    sol = pf.solve_portfolio(market, grid)
    lines = [f"scenario {cfg.name}", f"constraint {market.constraint}"]
    ok = True
    game = sol.game
    if market.constraint == pf.CONSTRAINT_NONE:
        general = sre.solve_sre(game, grid)
        dev = float(np.abs(general.P - sol.sres["main"].P).max())
        flag = dev <= 1e-9
    else:
        gpos, gneg = sre.solve_sre_constrained(game, grid)
        dev = max(float(np.abs(gpos.P - sol.sres["pos"].P).max()),
                  float(np.abs(gneg.P - sol.sres["neg"].P).max()))
        flag = dev <= 1e-8
    lines.append(f"general-solver agreement: {'pass' if flag else 'FAIL'} "
                 f"(max deviation {dev:.3e})")
    ok &= flag
    bundle = engine.sample_paths(game, grid, cfg.paths, cfg.seed)
    jhat, se = engine.estimate_objective(game, sol.law1, sol.law1, bundle)
    gap = abs(jhat - sol.value)
    flag = gap <= cfg.soft_sigma * se
    lines.append(f"value reproduction: {'pass' if flag else 'FAIL'} "
                 f"(J {jhat:.8g} vs V {sol.value:.8g}, stderr {se:.3g})")
    ok &= flag
    lines.append(f"result {'pass' if ok else 'fail'}")
    _write(out, f"{cfg.name}_verify.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if ok else 2


def _cmd_portfolio(cfg, args, out) -> int:
    if cfg.kind != "market":
        raise SregameError("the portfolio command needs a [market] scenario")
    market = cfg.market
    sol = pf.solve_portfolio(market, _grid_for(cfg, args))
    cons = sol.constants
    lines = [
        f"scenario {cfg.name}", f"constraint {market.constraint}",
        f"eps1 {cons.eps1:.17g}", f"eps2 {cons.eps2:.17g}",
        f"value {sol.value:.17g}",
    ]
    for name, s in sol.sres.items():
        header, rows = tables.solution_rows(s)
        _write(out, f"{cfg.name}_{name}.txt", tables.format_table(header, rows))
    bundle = engine.sample_paths(sol.game, sol.law1.grid, cfg.paths, cfg.seed)
    jhat, se = engine.estimate_objective(sol.game, sol.law1, sol.law1, bundle)
    lines.append(f"objective {jhat:.17g} stderr {se:.17g}")
    _write(out, f"{cfg.name}_portfolio.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_bounds(cfg, args, out) -> int:
    model = cfg.model if cfg.kind == "game" else pf.to_game(cfg.market)
    grid = _grid_for(cfg, args)
    rep = compute_constants(model)
    env = sre.comparison_envelope(model, rep)
    header, rows = tables.envelope_rows(env, grid)
    _write(out, f"{cfg.name}_envelope.txt", tables.format_table(header, rows))
    print(f"epsilon {rep.epsilon:.17g} epsbar {rep.epsbar:.17g}")
    return 0


def _cmd_roundtrip(cfg, args, out) -> int:  # pragma: no cover - debugging aid
    _write(out, f"{cfg.name}_echo.toml", serialize_config(cfg.raw))
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "solve-sre": _cmd_solve_sre,
    "solve-game": _cmd_solve_game,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
    "portfolio": _cmd_portfolio,
    "bounds": _cmd_bounds,
}


if __name__ == "__main__":
    sys.exit(main())
