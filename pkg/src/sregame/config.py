"""Scenario configuration: TOML loading, validation, and lossless re-emission.

A scenario file contains exactly one of a [dynamics]/[cost] pair (a general
game) or a [market] section, plus [scenario], [regimes], [grid],
[monte_carlo], [verification], [cones] and [output].  Coefficient tables are
given per regime, either constant in time or as one row per grid node.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import (CONE_FULL, CONE_ORTHANT, CONE_RAYS, ConeSpec,
                    CostCoefficients, GameModel, RegimeGenerator,
                    SystemCoefficients, full_cone)
from .portfolio import _CONSTRAINTS, MarketSpec


@dataclass
class ScenarioConfig:
    """Parsed scenario plus the raw document for lossless round-trips."""

    name: str
    kind: str                      # "game" | "market"
    model: Optional[GameModel]
    market: Optional[MarketSpec]
    paths: int
    seed: int
    perturb_u1: list
    perturb_beta2: list
    soft_sigma: float
    hard_sigma: float
    out_dir: str
    raw: dict = field(repr=False, default_factory=dict)


def _need(doc: dict, section: str) -> dict:
    if section not in doc:
        raise ConfigError(f"missing [{section}] section")
    return doc[section]


def _table(sec: dict, key: str, tail_rank: int, where: str):
    if key not in sec:
        raise ConfigError(f"missing key {key!r} in [{where}]")
    a = np.asarray(sec[key], dtype=float)
    if a.ndim not in (tail_rank + 1, tail_rank + 2):
        raise ConfigError(
            f"{where}.{key}: expected {tail_rank + 1} (constant) or "
            f"{tail_rank + 2} (per-node) nesting levels, got {a.ndim}")
    return a


def _cone_from(spec, dim: int) -> ConeSpec:
    if spec is None or spec == "full":
        return full_cone(dim)
    if spec == "orthant":
        return ConeSpec(CONE_ORTHANT, dim)
    if isinstance(spec, list):
        return ConeSpec(CONE_RAYS, dim, rays=np.asarray(spec, dtype=float))
    raise ConfigError(f"cannot interpret cone spec {spec!r}")


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return parse_config(doc)


def parse_config(doc: dict) -> ScenarioConfig:
    scen = _need(doc, "scenario")
    name = scen.get("name", "scenario")
    grid = _need(doc, "grid")
    try:
        T = float(grid["horizon"])
        N = int(grid["steps"])
    except KeyError as exc:
        raise ConfigError(f"[grid] needs horizon and steps: {exc}") from exc
    reg = _need(doc, "regimes")
    try:
        gen = RegimeGenerator(np.asarray(reg["q"], dtype=float))
    except KeyError as exc:
        raise ConfigError("[regimes] needs the rate matrix q") from exc
    i0 = int(reg.get("initial", 0))

    has_game = "dynamics" in doc
    has_market = "market" in doc
    if has_game == has_market:
        raise ConfigError("exactly one of [dynamics]+[cost] or [market] must be present")

    mc = doc.get("monte_carlo", {})
    ver = doc.get("verification", {})
    out = doc.get("output", {})
    cfg = dict(
        name=name,
        paths=int(mc.get("paths", 10000)),
        seed=int(mc.get("seed", 0)),
        perturb_u1=list(ver.get("perturb_u1", [])),
        perturb_beta2=list(ver.get("perturb_beta2", [])),
        soft_sigma=float(ver.get("soft_sigma", 3.0)),
        hard_sigma=float(ver.get("hard_sigma", 5.0)),
        out_dir=str(out.get("dir", "out")),
        raw=doc,
    )

    try:
        if has_game:
            model = _game_from(doc, T, N, gen, i0)
            return ScenarioConfig(kind="game", model=model, market=None, **cfg)
        market = _market_from(doc, T, N, gen, i0)
        return ScenarioConfig(kind="market", model=None, market=market, **cfg)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc


def _game_from(doc, T, N, gen, i0) -> GameModel:
    dyn = _need(doc, "dynamics")
    cost = _need(doc, "cost")
    n = int(dyn.get("n", 1))
    m1 = int(dyn.get("m1", 1))
    m2 = int(dyn.get("m2", 1))
    sys_co = SystemCoefficients(
        n=n, m1=m1, m2=m2,
        A=_table(dyn, "A", 0, "dynamics"),
        B1=_table(dyn, "B1", 1, "dynamics"),
        B2=_table(dyn, "B2", 1, "dynamics"),
        b=_table(dyn, "b", 0, "dynamics"),
        C=_table(dyn, "C", 1, "dynamics"),
        D1=_table(dyn, "D1", 2, "dynamics"),
        D2=_table(dyn, "D2", 2, "dynamics"),
        sigma=_table(dyn, "sigma", 1, "dynamics"),
    )
    cost_co = CostCoefficients(
        K=_table(cost, "K", 0, "cost"),
        R11=_table(cost, "R11", 2, "cost"),
        R12=_table(cost, "R12", 2, "cost"),
        R22=_table(cost, "R22", 2, "cost"),
        G=np.asarray(cost["G"], dtype=float),
    )
    cones_sec = doc.get("cones", {})
    cones = (_cone_from(cones_sec.get("player1"), m1),
             _cone_from(cones_sec.get("player2"), m2))
    return GameModel(T=T, N=N, gen=gen, sys=sys_co, cost=cost_co,
                     x0=float(dyn.get("x0", 0.0)), i0=i0, cones=cones)


def _market_from(doc, T, N, gen, i0) -> MarketSpec:
    mk = _need(doc, "market")
    constraint = mk.get("constraint", "none")
    if constraint not in _CONSTRAINTS:
        raise ConfigError(f"unknown market constraint {constraint!r}")
    return MarketSpec(
        T=T, N=N, gen=gen, i0=i0,
        r=_table(mk, "r", 0, "market"),
        mu1=_table(mk, "mu1", 0, "market"),
        mu2=_table(mk, "mu2", 0, "market"),
        sigma1=_table(mk, "sigma1", 1, "market"),
        sigma2=_table(mk, "sigma2", 1, "market"),
        R1=_table(mk, "R1", 0, "market"),
        R2=_table(mk, "R2", 0, "market"),
        y1=float(mk.get("y1", 1.0)),
        y2=float(mk.get("y2", 1.0)),
        constraint=constraint,
    )


# ---------------------------------------------------------------------------
# Minimal TOML emission for our restricted schema (round-trip exact)
# ---------------------------------------------------------------------------

def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        r = repr(v)
        return r if ("." in r or "e" in r or "inf" in r or "nan" in r) else r + ".0"
    if isinstance(v, str):
        import json
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_emit_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize value of type {type(v).__name__}")


def serialize_config(doc: dict) -> str:
    """Emit the raw scenario document back to TOML text."""
    lines = []
    scalars = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    for k, v in scalars.items():
        lines.append(f"{k} = {_emit_value(v)}")
    for section, body in doc.items():
        if not isinstance(body, dict):
            continue
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in body.items():
            if isinstance(v, dict):
                raise ConfigError(f"nested tables beyond one level: {section}.{k}")
            lines.append(f"{k} = {_emit_value(v)}")
    return "\n".join(lines).lstrip("\n") + "\n"
