"""Classical and agent-assisted generalized Benders decomposition loops."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import master as mst
from .graph import encode_normalized
from .master import NEG_INF, MasterState, bound_from_json, bound_to_json
from .nlp import DEFAULT_SETTINGS, BarrierSettings, SolveStatus, SubproblemCache, solve_subproblem
from .problem import SchemaMismatch, binary_points
from .verifier import ConfidenceConfig, Mode, confidence_based_assignment, monotone_lbd

TRACE_SCHEMA_VERSION = 1
NEWTON_SECONDS = 1e-3   # deterministic-time mode: seconds charged per Newton step
SOLVER_MODE = "Solver"  # assignment mode recorded for classical iterations


class SolveFailure(RuntimeError):
    """A subproblem could not be solved to the required accuracy."""


@dataclass
class Limits:
    eps: float = 1e-4
    max_iter: int = 100
    max_seconds: float = 300.0


@dataclass
class GbdResult:
    status: str                 # "converged", "infeasible" or "limit"
    y: np.ndarray | None
    x: np.ndarray | None
    objective: float
    iterations: int
    total_time: float
    master_time: float
    subproblem_time: float
    exact_solves: int
    reduced_solves: int
    modes: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _ubd_json(v):
    return "inf" if v == math.inf else float(v)


def _ubd_from(v):
    return math.inf if v == "inf" else float(v)


def default_y0(inst) -> np.ndarray:
    """Lexicographically smallest y with K y <= b."""
    Y = binary_points(inst.m).astype(float)
    ok = np.all(Y @ inst.K.T <= inst.b + mst.CHECK_TOL, axis=1)
    if not ok.any():
        raise ValueError("no binary point satisfies the pure-binary rows")
    return Y[np.flatnonzero(ok)[0]]


class GbdRun:
    """Mutable state of one decomposition run, advanced one iteration at a time."""

    def __init__(self, inst, y0=None, limits: Limits = Limits(), mu_lo: float = mst.MU_LO_DEFAULT,
                 settings: BarrierSettings = DEFAULT_SETTINGS, time_mode: str = "wall",
                 cache: SubproblemCache | None = None):
        if time_mode not in ("wall", "newton"):
            raise ValueError(f"unknown time mode {time_mode!r}")
        self.inst = inst
        self.limits = limits
        self.settings = settings
        self.time_mode = time_mode
        self.cache = cache
        self.y = default_y0(inst) if y0 is None else np.asarray(y0, dtype=float).copy()
        if not np.all(inst.K @ self.y <= inst.b + mst.CHECK_TOL):
            raise ValueError("y0 violates the pure-binary rows")
        self.state = MasterState.for_instance(inst, self.y, mu_lo)
        self.ubd = math.inf
        self.lbd = NEG_INF
        self.best = None
        self.rows: list[dict] = []
        self.started = time.monotonic()
        self.master_time = 0.0
        self.sp_time = 0.0
        self.exact_solves = 0
        self.reduced_solves = 0
        self.status = None
        self.last_sp = None

    # -- pieces of one iteration ------------------------------------------
    def subproblem(self) -> dict:
        """Solve S(y) at the current y, add a cut, update UBD."""
        if self.cache is None:
            sol = solve_subproblem(self.inst, self.y, self.settings)
        else:
            sol = self.cache.solve(self.inst, self.y, self.settings)
        t_sp = sol.wall_time if self.time_mode == "wall" else sol.iterations * NEWTON_SECONDS
        self.sp_time += t_sp
        self.state.y_prev = self.y.copy()
        if sol.status is SolveStatus.FEASIBLE:
            mst.add_optimality_cut(self.state, sol, self.inst)
            kind = "optimality"
            if sol.objective < self.ubd:
                self.ubd = sol.objective
                self.best = sol
        elif sol.status is SolveStatus.INFEASIBLE:
            mst.add_feasibility_cut(self.state, sol, self.inst)
            kind = "feasibility"
        else:
            raise SolveFailure(f"subproblem failed at y={self.y.tolist()}")
        self.last_sp = sol
        return {"status": sol.status.value, "cut": kind, "t_sp": t_sp,
                "sp_wall": sol.wall_time, "sp_newton": sol.iterations}

    def gap(self) -> float:
        if self.lbd is NEG_INF or self.ubd == math.inf:
            return math.inf
        return self.ubd - self.lbd

    def done(self) -> bool:
        return self.gap() <= self.limits.eps

    def record(self, info: dict, mode: str, t_master: float, n_exact: int, n_reduced: int,
               fixed_count: int = 0, **extra) -> dict:
        row = {"iter": len(self.rows), "y": self.y.astype(int).tolist(),
               "status": info["status"], "cut": info["cut"],
               "UBD": _ubd_json(self.ubd), "LBD": bound_to_json(self.lbd), "mode": mode,
               "fixed_count": fixed_count, "exact_solves": n_exact, "reduced_solves": n_reduced,
               "master_time": t_master, "subproblem_time": info["t_sp"],
               "sp_wall": info["sp_wall"], "sp_newton": info["sp_newton"], **extra}
        self.rows.append(row)
        return row

    def out_of_budget(self) -> bool:
        return (len(self.rows) >= self.limits.max_iter
                or time.monotonic() - self.started > self.limits.max_seconds)

    def result(self) -> GbdResult:
        modes: dict[str, int] = {}
        for r in self.rows:
            modes[r["mode"]] = modes.get(r["mode"], 0) + 1
        best = self.best
        return GbdResult(status=self.status or "limit",
                         y=None if best is None else best.y.copy(),
                         x=None if best is None else best.x.copy(),
                         objective=self.ubd, iterations=len(self.rows),
                         total_time=time.monotonic() - self.started,
                         master_time=self.master_time, subproblem_time=self.sp_time,
                         exact_solves=self.exact_solves, reduced_solves=self.reduced_solves,
                         modes=modes)


@dataclass
class GbdTrace:
    kind: str
    rows: list
    terminal: dict
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {"schema_version": TRACE_SCHEMA_VERSION, "kind": "gbd_trace", "solver": self.kind,
                **self.meta}

    def ubd(self) -> list:
        return [_ubd_from(r["UBD"]) for r in self.rows]

    def lbd(self) -> list:
        return [bound_from_json(r["LBD"]) for r in self.rows]

    def to_jsonl(self) -> str:
        lines = [self.header()] + self.rows + [{"terminal": True, **self.terminal}]
        return "\n".join(json.dumps(x, sort_keys=True) for x in lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "GbdTrace":
        lines = [json.loads(s) for s in text.splitlines() if s.strip()]
        if not lines or lines[0].get("kind") != "gbd_trace":
            raise SchemaMismatch("not a trace file")
        head = lines[0]
        if head.get("schema_version") != TRACE_SCHEMA_VERSION:
            raise SchemaMismatch(f"trace schema {head.get('schema_version')} unsupported")
        if not lines[-1].get("terminal"):
            raise SchemaMismatch("trace has no terminal row")
        meta = {k: v for k, v in head.items() if k not in ("schema_version", "kind", "solver")}
        term = {k: v for k, v in lines[-1].items() if k != "terminal"}
        return cls(head["solver"], lines[1:-1], term, meta)

    @classmethod
    def load(cls, path) -> "GbdTrace":
        with open(path) as fh:
            return cls.from_jsonl(fh.read())


def trace_violations(trace: GbdTrace, eps: float, tol: float = 1e-9) -> list[str]:
    """Bound-monotonicity and convergence checks; empty when the trace is sound."""
    out = []
    ubd, lbd = trace.ubd(), trace.lbd()
    for k in range(1, len(ubd)):
        if ubd[k] > ubd[k - 1] + tol:
            out.append(f"UBD increased at iter {k}")
        if lbd[k] < lbd[k - 1] and not (lbd[k - 1] is NEG_INF):
            out.append(f"LBD decreased at iter {k}")
    for k, (u, lo) in enumerate(zip(ubd, lbd)):
        if lo is not NEG_INF and u != math.inf and lo > u + eps:
            out.append(f"LBD above UBD + eps at iter {k}")
    if trace.terminal.get("status") == "converged" and lbd and ubd:
        if lbd[-1] is NEG_INF or ubd[-1] - lbd[-1] > eps:
            out.append("converged flag without closed gap")
    return out


def _make_trace(run: GbdRun, kind: str, **meta) -> GbdTrace:
    res = run.result()
    terminal = {"status": res.status, "converged": res.converged,
                "objective": _ubd_json(res.objective),
                "y": None if res.y is None else res.y.astype(int).tolist(),
                "iterations": res.iterations, "total_time": res.total_time,
                "master_time": res.master_time, "subproblem_time": res.subproblem_time,
                "exact_solves": res.exact_solves, "reduced_solves": res.reduced_solves,
                "eps": run.limits.eps}
    meta = {"instance_kind": run.inst.kind, "params": run.inst.params, "time_mode": run.time_mode,
            **meta}
    return GbdTrace(kind, run.rows, terminal, meta)


def solve_classical(inst, y0=None, limits: Limits = Limits(), mu_lo: float = mst.MU_LO_DEFAULT,
                    settings: BarrierSettings = DEFAULT_SETTINGS, time_mode: str = "wall",
                    method: str = "auto", cache: SubproblemCache | None = None,
                    observer=None) -> tuple[GbdResult, GbdTrace]:
    """Classical loop: subproblem, cut, exact master.  ``observer(state, master_result)`` sees every master solve."""
    run = GbdRun(inst, y0, limits, mu_lo, settings, time_mode, cache)
    while True:
        info = run.subproblem()
        t0 = time.monotonic()
        res = mst.solve_exact(run.state, method)
        t_master = time.monotonic() - t0
        if observer is not None:
            observer(run.state, res)
        run.master_time += t_master
        run.exact_solves += 1
        if res.infeasible:
            run.record(info, SOLVER_MODE, t_master, 1, 0)
            run.status = "infeasible" if run.ubd == math.inf else "master_infeasible"
            break
        run.lbd = res.mu_b if run.state.opt_cuts else NEG_INF
        run.record(info, SOLVER_MODE, t_master, 1, 0)
        if run.done():
            run.status = "converged"
            break
        if run.out_of_budget():
            run.status = "limit"
            break
        run.y = res.y
    return run.result(), _make_trace(run, "classical")


def hybrid_step(run: GbdRun, p, cfg: ConfidenceConfig, method: str = "auto",
                margin: float = 0.0):
    """Master half of one agent-assisted iteration; returns the outcome."""
    t0 = time.monotonic()
    out = confidence_based_assignment(p, run.state, run.ubd, cfg, method, margin)
    return out, time.monotonic() - t0


def solve_hybrid(inst, y0, actor, cfg: ConfidenceConfig = ConfidenceConfig(),
                 limits: Limits = Limits(), mu_lo: float = mst.MU_LO_DEFAULT,
                 settings: BarrierSettings = DEFAULT_SETTINGS, time_mode: str = "wall",
                 method: str = "auto", cache: SubproblemCache | None = None,
                 cost_margin: float | None = None, lbd_rule: str = "certified"
                 ) -> tuple[GbdResult, GbdTrace]:
    """``actor`` is either network parameters or a callable graph -> probabilities.

    ``cost_margin`` (default: the tolerance eps) is how far below the incumbent
    a candidate cost must lie to be accepted without the exact master.

    ``lbd_rule`` decides which master costs are folded into LBD with the
    running max: "certified" uses only values from exact master solves, which
    are true lower bounds; "candidate" also folds in the cost of accepted
    agent assignments, which need not bound the optimum from below.
    """
    if lbd_rule not in ("certified", "candidate"):
        raise ValueError(f"unknown lbd_rule {lbd_rule!r}")
    margin = limits.eps if cost_margin is None else cost_margin
    from .nn import NetParams, actor_forward
    if isinstance(actor, NetParams):
        params = actor
        if params.role != "actor" or params.arch["m"] != inst.m:
            raise ValueError("actor weights do not fit this instance")
        policy = lambda graph: actor_forward(params, graph)  # noqa: E731
    else:
        policy = actor
    run = GbdRun(inst, y0, limits, mu_lo, settings, time_mode, cache)
    while True:
        info = run.subproblem()
        t0 = time.monotonic()
        p = policy(encode_normalized(run.state, inst))
        t_policy = time.monotonic() - t0
        out, t_assign = hybrid_step(run, p, cfg, method, margin)
        t_master = t_policy + t_assign
        run.master_time += t_master
        run.exact_solves += out.exact_solves
        run.reduced_solves += out.reduced_solves
        extra = {"mu_b": bound_to_json(out.mu_b), "ubd_at_decision": _ubd_json(run.ubd)}
        if out.mode is Mode.MASTER_INFEASIBLE:
            run.record(info, out.mode.value, t_master, out.exact_solves, out.reduced_solves,
                       out.fixed_count, **extra)
            run.status = "infeasible" if run.ubd == math.inf else "master_infeasible"
            break
        certified = out.exact_solves > 0
        if (run.state.opt_cuts or out.mu_b is NEG_INF) and (certified or lbd_rule == "candidate"):
            run.lbd = monotone_lbd(run.lbd, out.mu_b)
        run.record(info, out.mode.value, t_master, out.exact_solves, out.reduced_solves,
                   out.fixed_count, **extra)
        if run.done():
            run.status = "converged"
            break
        if run.out_of_budget():
            run.status = "limit"
            break
        run.y = out.y
    return run.result(), _make_trace(run, "hybrid", lbd_rule=lbd_rule, cost_margin=margin)
