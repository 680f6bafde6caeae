"""Benders master problem: cut storage, feasibility checks and exact solves.

Because y is binary and mu_b only appears as an epigraph variable, the
master reduces to ``min_y max_k (w_k.y + beta_k)`` over the y that satisfy
the pure-binary rows and every feasibility cut.  It is solved by vectorized
enumeration for small m and by branch and bound otherwise.  Ties go to the
lexicographically smallest y so traces are reproducible.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .nlp import TOL_FEAS, SubproblemSolution
from .problem import SchemaMismatch, binary_points

CUT_SCHEMA_VERSION = 1
CHECK_TOL = 1e-9
TIE_TOL = 1e-9
MU_LO_DEFAULT = -1e6
ENUM_MAX_M = 20


class ContractViolation(ValueError):
    """Operation called on data that does not meet its precondition."""


class _NegInf:
    """Minus infinity as a tagged value.

    Compares below every number and equal only to itself; any arithmetic
    raises, so a missing bound can never leak into a sum or a float trace.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NEG_INF"

    def __reduce__(self):
        return (_NegInf, ())

    def __eq__(self, other):
        return other is self

    def __hash__(self):
        return hash("gbd_agent.NEG_INF")

    def __lt__(self, other):
        return other is not self

    def __le__(self, other):
        return True

    def __gt__(self, other):
        return False

    def __ge__(self, other):
        return other is self

    def _forbidden(self, *args):
        raise TypeError("arithmetic with the -inf sentinel is not allowed")

    __add__ = __radd__ = __sub__ = __rsub__ = __mul__ = __rmul__ = _forbidden
    __truediv__ = __rtruediv__ = __neg__ = __abs__ = __float__ = _forbidden


NEG_INF = _NegInf()


def bound_to_json(value):
    """Serialize a bound that may be the sentinel."""
    return "-inf" if value is NEG_INF else float(value)


def bound_from_json(value):
    return NEG_INF if value == "-inf" else float(value)


@dataclass(frozen=True)
class OptimalityCut:
    """mu_b >= w.y + beta"""
    w: np.ndarray
    beta: float
    y_gen: np.ndarray | None = None

    def value(self, y) -> float:
        return float(self.w @ np.asarray(y, dtype=float) + self.beta)


@dataclass(frozen=True)
class FeasibilityCut:
    """v.y + gamma <= 0"""
    v: np.ndarray
    gamma: float
    y_gen: np.ndarray | None = None
    slack: float = 0.0

    def lhs(self, y) -> float:
        return float(self.v @ np.asarray(y, dtype=float) + self.gamma)


def optimality_cut_from(sol: SubproblemSolution, inst) -> OptimalityCut:
    if not sol.feasible:
        raise ContractViolation(f"optimality cut needs a feasible subproblem, got {sol.status}")
    cf = inst.convex
    lam, mu = np.asarray(sol.lam, float), np.asarray(sol.mu, float)
    w = inst.e + inst.A.T @ lam + inst.B.T @ mu
    beta = cf.f(sol.x) - sol.cut_shift
    if inst.p:
        beta += float(lam @ cf.h(sol.x))
    if inst.q:
        beta += float(mu @ cf.g(sol.x))
    return OptimalityCut(w=w, beta=float(beta), y_gen=np.asarray(sol.y, float).copy())


def feasibility_cut_from(sol: SubproblemSolution, inst) -> FeasibilityCut:
    if sol.feasible or not np.isfinite(sol.objective) or sol.objective <= TOL_FEAS:
        raise ContractViolation("feasibility cut needs an F(y) solution with positive slack")
    lam, mu = np.asarray(sol.lam, float), np.asarray(sol.mu, float)
    if not np.any(lam) and not np.any(mu):
        raise ContractViolation("all-zero multipliers give a degenerate feasibility cut")
    cf = inst.convex
    v = inst.A.T @ lam + inst.B.T @ mu
    gamma = -sol.cut_shift
    if inst.p:
        gamma += float(lam @ cf.h(sol.x))
    if inst.q:
        gamma += float(mu @ cf.g(sol.x))
    if not np.any(np.abs(v) > 1e-12) and gamma <= 0:
        raise ContractViolation("feasibility cut excludes nothing")
    return FeasibilityCut(v=v, gamma=float(gamma), y_gen=np.asarray(sol.y, float).copy(),
                          slack=float(sol.objective))


@dataclass
class MasterResult:
    optimal: bool
    y: np.ndarray | None = None
    mu_b: float = 0.0
    nodes: int = 0

    @property
    def infeasible(self) -> bool:
        return not self.optimal


@dataclass
class MasterState:
    K: np.ndarray
    b: np.ndarray
    y_prev: np.ndarray
    mu_lo: float = MU_LO_DEFAULT
    opt_cuts: list[OptimalityCut] = field(default_factory=list)
    feas_cuts: list[FeasibilityCut] = field(default_factory=list)

    @classmethod
    def for_instance(cls, inst, y0=None, mu_lo: float = MU_LO_DEFAULT) -> "MasterState":
        y0 = np.zeros(inst.m) if y0 is None else np.asarray(y0, dtype=float).copy()
        return cls(K=np.asarray(inst.K, float), b=np.asarray(inst.b, float), y_prev=y0, mu_lo=mu_lo)

    @property
    def m(self) -> int:
        return self.K.shape[1]

    @property
    def n_cuts(self) -> int:
        return len(self.opt_cuts) + len(self.feas_cuts)

    def copy(self) -> "MasterState":
        return MasterState(self.K, self.b, self.y_prev.copy(), self.mu_lo,
                           list(self.opt_cuts), list(self.feas_cuts))

    # cut matrices, rebuilt on demand (a few dozen rows at most)
    def opt_matrix(self):
        if not self.opt_cuts:
            return np.zeros((0, self.m)), np.zeros(0)
        return (np.array([c.w for c in self.opt_cuts]),
                np.array([c.beta for c in self.opt_cuts]))

    def feas_rows(self):
        """All rows R y <= r that a feasible y must satisfy (K rows, then cuts)."""
        if not self.feas_cuts:
            return self.K, self.b
        V = np.array([c.v for c in self.feas_cuts])
        g = np.array([c.gamma for c in self.feas_cuts])
        return np.vstack([self.K, V]), np.concatenate([self.b, -g])


def add_optimality_cut(state: MasterState, sol: SubproblemSolution, inst) -> int:
    state.opt_cuts.append(optimality_cut_from(sol, inst))
    return len(state.opt_cuts) - 1


def add_feasibility_cut(state: MasterState, sol: SubproblemSolution, inst) -> int:
    state.feas_cuts.append(feasibility_cut_from(sol, inst))
    return len(state.feas_cuts) - 1


def _as_y(state, y):
    y = np.asarray(y, dtype=float)
    if y.shape != (state.m,):
        raise ValueError(f"expected y of length {state.m}")
    return y


def check_feasible(state: MasterState, y) -> bool:
    """Pure-binary rows and feasibility cuts only; optimality cuts never bind."""
    y = _as_y(state, y)
    R, r = state.feas_rows()
    return bool(np.all(R @ y <= r + CHECK_TOL))


def eval_candidate_cost(state: MasterState, y):
    y = _as_y(state, y)
    if not state.opt_cuts:
        return NEG_INF
    W, beta = state.opt_matrix()
    return float(np.max(W @ y + beta))


def _objective(state: MasterState, Y: np.ndarray) -> np.ndarray:
    W, beta = state.opt_matrix()
    if len(beta) == 0:
        return np.full(len(Y), float(state.mu_lo))
    return np.max(Y @ W.T + beta, axis=1)


def _enumerate(state: MasterState, fixed: dict[int, int]) -> MasterResult:
    Y = binary_points(state.m).astype(float)
    for j, v in fixed.items():
        Y = Y[Y[:, j] == v]
    R, r = state.feas_rows()
    Y = Y[np.all(Y @ R.T <= r + CHECK_TOL, axis=1)]
    if len(Y) == 0:
        return MasterResult(False, nodes=0)
    cost = _objective(state, Y)
    # rows are in lexicographic order, so the first near-minimal row wins
    k = int(np.flatnonzero(cost <= cost.min() + TIE_TOL)[0])
    return MasterResult(True, Y[k].copy(), float(cost[k]), nodes=len(Y))


class _BranchAndBound:
    """Bounds on a partial assignment via interval arithmetic on free bits."""

    def __init__(self, state: MasterState):
        self.state = state
        self.R, self.r = state.feas_rows()
        self.W, self.beta = state.opt_matrix()
        self.nodes = 0

    def feasible_possible(self, y, depth):
        fixed = self.R[:, :depth] @ y[:depth]
        lo = fixed + np.minimum(self.R[:, depth:], 0).sum(axis=1)
        return bool(np.all(lo <= self.r + CHECK_TOL))

    def bound(self, y, depth):
        if len(self.beta) == 0:
            return float(self.state.mu_lo)
        lo = self.W[:, :depth] @ y[:depth] + np.minimum(self.W[:, depth:], 0).sum(axis=1)
        return float(np.max(lo + self.beta))

    def leaf_value(self, y):
        if len(self.beta) == 0:
            return float(self.state.mu_lo)
        return float(np.max(self.W @ y + self.beta))

    def children(self, y, depth, fixed):
        values = (fixed[depth],) if depth in fixed else (0.0, 1.0)
        for v in values:
            child = y.copy()
            child[depth] = v
            if self.feasible_possible(child, depth + 1):
                yield child

    def best_value(self, fixed):
        """Best-first search for the optimal value."""
        m = self.state.m
        best = np.inf
        root = np.zeros(m)
        if not self.feasible_possible(root, 0):
            return best
        heap = [(self.bound(root, 0), 0, 0, root)]
        counter = 1
        while heap:
            lb, _, depth, y = heapq.heappop(heap)
            self.nodes += 1
            if lb >= best:
                break
            if depth == m:
                best = min(best, self.leaf_value(y))
                continue
            for child in self.children(y, depth, fixed):
                cb = self.bound(child, depth + 1)
                if cb < best:
                    heapq.heappush(heap, (cb, counter, depth + 1, child))
                    counter += 1
        return best

    def first_within(self, fixed, target):
        """Lexicographically first leaf with value <= target (depth first)."""
        m = self.state.m
        stack = [(0, np.zeros(m))] if self.feasible_possible(np.zeros(m), 0) else []
        while stack:
            depth, y = stack.pop()
            self.nodes += 1
            if self.bound(y, depth) > target:
                continue
            if depth == m:
                if self.leaf_value(y) <= target:
                    return y
                continue
            # push the 1-branch first so the 0-branch is explored first
            for child in reversed(list(self.children(y, depth, fixed))):
                stack.append((depth + 1, child))
        return None


def _branch_and_bound(state: MasterState, fixed: dict[int, int]) -> MasterResult:
    bb = _BranchAndBound(state)
    best = bb.best_value(fixed)
    if not np.isfinite(best):
        return MasterResult(False, nodes=bb.nodes)
    y = bb.first_within(fixed, best + TIE_TOL)
    return MasterResult(True, y, bb.leaf_value(y), nodes=bb.nodes)


def _check_fixed(state, fixed):
    out = {}
    for j, v in dict(fixed or {}).items():
        j = int(j)
        if not 0 <= j < state.m or v not in (0, 1):
            raise ValueError(f"bad fixing {j} -> {v}")
        out[j] = float(v)
    return out


def solve_reduced(state: MasterState, fixed, method: str = "auto") -> MasterResult:
    """Exact master restricted to assignments that extend ``fixed``."""
    fixed = _check_fixed(state, fixed)
    if method == "auto":
        method = "enumerate" if state.m <= ENUM_MAX_M else "bnb"
    if method == "enumerate":
        if state.m > ENUM_MAX_M:
            raise ValueError(f"enumeration limited to m <= {ENUM_MAX_M}")
        return _enumerate(state, fixed)
    if method == "bnb":
        return _branch_and_bound(state, fixed)
    raise ValueError(f"unknown master method {method!r}")


def solve_exact(state: MasterState, method: str = "auto") -> MasterResult:
    return solve_reduced(state, {}, method)


def cuts_to_dict(state: MasterState) -> dict:
    records = [{"kind": "optimality", "coef": c.w.tolist(), "const": c.beta}
               for c in state.opt_cuts]
    records += [{"kind": "feasibility", "coef": c.v.tolist(), "const": c.gamma}
                for c in state.feas_cuts]
    return {"schema_version": CUT_SCHEMA_VERSION, "kind": "cut_dump",
            "K": state.K.tolist(), "b": state.b.tolist(), "y_prev": state.y_prev.tolist(),
            "mu_lo": state.mu_lo, "cuts": records}


def state_from_dict(doc: dict) -> MasterState:
    if doc.get("schema_version") != CUT_SCHEMA_VERSION or doc.get("kind") != "cut_dump":
        raise SchemaMismatch("not a cut dump of a supported version")
    state = MasterState(K=np.array(doc["K"], float), b=np.array(doc["b"], float),
                        y_prev=np.array(doc["y_prev"], float), mu_lo=float(doc["mu_lo"]))
    for rec in doc["cuts"]:
        coef = np.array(rec["coef"], float)
        if rec["kind"] == "optimality":
            state.opt_cuts.append(OptimalityCut(coef, float(rec["const"])))
        elif rec["kind"] == "feasibility":
            state.feas_cuts.append(FeasibilityCut(coef, float(rec["const"])))
        else:
            raise SchemaMismatch(f"unknown cut kind {rec['kind']!r}")
    return state


def dump_cuts(state: MasterState, path) -> None:
    with open(path, "w") as fh:
        json.dump(cuts_to_dict(state), fh, indent=1)


def load_cuts(path) -> MasterState:
    with open(path) as fh:
        return state_from_dict(json.load(fh))
