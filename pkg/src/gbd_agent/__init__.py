"""Generalized Benders decomposition for convex MINLPs with a learned master-problem agent."""
from .engine import GbdResult, GbdTrace, Limits, solve_classical, solve_hybrid
from .master import NEG_INF, MasterState
from .problem import ProblemInstance, brute_force_solve, build_case_study1, sample_coefficients
from .verifier import ConfidenceConfig, Mode

__version__ = "0.1.0"

__all__ = [
    "ConfidenceConfig", "GbdResult", "GbdTrace", "Limits", "MasterState", "Mode", "NEG_INF",
    "ProblemInstance", "brute_force_solve", "build_case_study1", "sample_coefficients",
    "solve_classical", "solve_hybrid", "__version__",
]
