"""Confidence-based assignment of the master problem at deployment time."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .master import NEG_INF, MasterState, check_feasible, eval_candidate_cost, solve_exact, solve_reduced


class Mode(enum.Enum):
    FULL_ACCEPTED = "FullAccepted"
    FULL_REJECTED_FEASIBILITY = "FullRejectedFeasibility"
    FULL_REJECTED_COST = "FullRejectedCost"
    PARTIAL_ACCEPTED = "PartialAccepted"
    PARTIAL_FALLBACK = "PartialFallback"
    NO_ASSIGNMENT = "NoAssignment"
    MASTER_INFEASIBLE = "MasterInfeasible"


ACCEPTED_MODES = (Mode.FULL_ACCEPTED, Mode.PARTIAL_ACCEPTED)


@dataclass(frozen=True)
class ConfidenceConfig:
    delta1: float = 0.10
    delta2: float = 0.90

    def __post_init__(self):
        if not 0.0 <= self.delta1 <= self.delta2 <= 1.0:
            raise ValueError(f"need 0 <= delta1 <= delta2 <= 1, got {self.delta1}, {self.delta2}")


@dataclass
class AssignmentOutcome:
    y: np.ndarray | None
    mu_b: object            # float, or NEG_INF for an accepted cut-free assignment
    mode: Mode
    fixed_count: int
    exact_solves: int = 0   # full master solves
    reduced_solves: int = 0

    @property
    def solver_invoked(self) -> bool:
        return self.exact_solves + self.reduced_solves > 0


def threshold(p, cfg: ConfidenceConfig) -> tuple[dict[int, int], list[int]]:
    fixed, free = {}, []
    for i, pi in enumerate(np.asarray(p, dtype=float)):
        if pi <= cfg.delta1:
            fixed[i] = 0
        elif pi >= cfg.delta2:
            fixed[i] = 1
        else:
            free.append(i)
    return fixed, free


def _fallback(state, mode, n_fixed, reduced, method):
    res = solve_exact(state, method)
    if res.infeasible:
        return AssignmentOutcome(None, NEG_INF, Mode.MASTER_INFEASIBLE, n_fixed, 1, reduced)
    return AssignmentOutcome(res.y, res.mu_b, mode, n_fixed, 1, reduced)


def confidence_based_assignment(p, state: MasterState, ubd, cfg: ConfidenceConfig = ConfidenceConfig(),
                                method: str = "auto", margin: float = 0.0) -> AssignmentOutcome:
    """Threshold, verify, fall back.

    A candidate cost is accepted when it is at most ``ubd - margin``.  Inside a
    GBD loop the margin is the convergence tolerance, so an unproven candidate
    bound can never close the gap on its own.
    """
    limit = ubd - margin
    fixed, free = threshold(p, cfg)
    n_fixed = len(fixed)
    if not fixed:
        return _fallback(state, Mode.NO_ASSIGNMENT, 0, 0, method)
    if not free:
        y = np.array([fixed[i] for i in range(state.m)], dtype=float)
        if not check_feasible(state, y):
            return _fallback(state, Mode.FULL_REJECTED_FEASIBILITY, n_fixed, 0, method)
        mu_hat = eval_candidate_cost(state, y)
        if mu_hat <= limit:
            return AssignmentOutcome(y, mu_hat, Mode.FULL_ACCEPTED, n_fixed)
        return _fallback(state, Mode.FULL_REJECTED_COST, n_fixed, 0, method)
    res = solve_reduced(state, fixed, method)
    if res.optimal and res.mu_b <= limit:
        return AssignmentOutcome(res.y, res.mu_b, Mode.PARTIAL_ACCEPTED, n_fixed, 0, 1)
    return _fallback(state, Mode.PARTIAL_FALLBACK, n_fixed, 1, method)


def monotone_lbd(lbd_prev, mu_b):
    return mu_b if lbd_prev <= mu_b else lbd_prev
