"""Regime-switching zero-sum linear-quadratic games.

Solves the indefinite Riccati field and companion linear equation of the
two-player wealth/state game, synthesizes the optimal feedback
control-strategy pairs (with or without closed convex cone constraints),
and verifies the saddle-point and value identities by Monte Carlo.
"""

from .engine import (FeedbackLaw, PathBundle, Perturbation, SimulationReport,
                     build_feedback, chain_marginal, constrained_phi_residual,
                     estimate_objective, saddle_check, sample_paths,
                     simulate_closed_loop, simulate_with_controls,
                     value_formula)
from .errors import EXIT_CODES, SregameError
from .hamiltonian import (ConstrainedHamiltonianEval, HamiltonianEval,
                          assemble, best_response, cone_max, cone_min,
                          constrained_eval, h1_truncated, saddle_qp)
from .model import (AssumptionReport, Coeffs, ConeSpec, CostCoefficients,
                    GameModel, RegimeGenerator, SystemCoefficients,
                    compute_constants, full_cone, orthant_cone, scale_cost)
from .portfolio import (MarketConstants, MarketSpec, PortfolioSolution,
                        greeks, gtilde, market_constants, solve_portfolio,
                        solve_wealth_gap_sre, to_game)
from .sre import (ComparisonEnvelope, PhiSolution, RandomSRESolution,
                  SRESolution, TimeGrid, comparison_envelope, default_grid,
                  monotone_truncated_sequence, solve_linear_bsde, solve_sre,
                  solve_sre_constrained, solve_sre_random)

__version__ = "0.1.0"

__all__ = [
    "AssumptionReport", "Coeffs", "ComparisonEnvelope", "ConeSpec",
    "ConstrainedHamiltonianEval", "CostCoefficients", "EXIT_CODES",
    "FeedbackLaw", "GameModel", "HamiltonianEval", "MarketConstants",
    "MarketSpec", "PathBundle", "Perturbation", "PhiSolution",
    "PortfolioSolution", "RandomSRESolution", "RegimeGenerator",
    "SRESolution", "SimulationReport", "SregameError", "SystemCoefficients",
    "TimeGrid", "assemble", "best_response", "build_feedback",
    "chain_marginal", "compute_constants", "comparison_envelope", "cone_max",
    "cone_min", "constrained_eval", "constrained_phi_residual", "default_grid",
    "estimate_objective",
    "full_cone", "greeks", "gtilde", "h1_truncated", "market_constants",
    "monotone_truncated_sequence", "orthant_cone", "saddle_check",
    "saddle_qp", "sample_paths", "scale_cost", "simulate_closed_loop",
    "simulate_with_controls", "solve_linear_bsde", "solve_portfolio",
    "solve_sre", "solve_sre_constrained", "solve_sre_random",
    "solve_wealth_gap_sre", "to_game", "value_formula",
]
