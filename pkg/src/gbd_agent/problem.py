"""Convex MINLP instances with binaries entering linearly.

An instance is

    min  f(x) + e.y
    s.t. h(x) + A y  = 0
         g(x) + B y <= 0
         K y <= b
         E x <= d,  x_lo <= x <= x_hi,  y in {0,1}^m

with f, g convex and h affine.  The x-dependent parts live in a
:class:`ConvexFunctions` bundle; everything coupling y is plain matrices.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np

SCHEMA_VERSION = 1

U_BIG = 10.0
# finite cap for x11, x13, which are unbounded above in the original model
BOX_CAP = 10.0


class ValidationError(ValueError):
    pass


class ConvexFunctions:
    """Evaluator bundle for the x-dependent parts of an instance.

    Subclasses provide values, first derivatives and curvature.  ``hess_g``
    returns the weighted sum ``sum_i w_i * hess(g_i)(x)`` rather than a stack
    of matrices, which is all a Newton step needs.
    """

    n: int
    p: int
    q: int

    def f(self, x):
        raise NotImplementedError

    def grad_f(self, x):
        raise NotImplementedError

    def hess_f(self, x):
        raise NotImplementedError

    def h(self, x):
        return np.zeros(self.p)

    def jac_h(self, x):
        return np.zeros((self.p, self.n))

    def g(self, x):
        raise NotImplementedError

    def jac_g(self, x):
        raise NotImplementedError

    def hess_g(self, x, w):
        raise NotImplementedError

    def signature(self) -> tuple:
        """Equal signatures promise identical evaluators."""
        return (type(self).__name__, id(self))


class CaseStudy1Functions(ConvexFunctions):
    # x = (x3, x5, x9, x11, x13, x16); row order of g is part of the file format
    n, p, q = 6, 0, 12

    def signature(self) -> tuple:
        return (type(self).__name__,)

    _lin = np.array([-10.0, -15.0, -15.0, 15.0, 5.0, -20.0])
    _G_LIN = np.array([
        [0, 0, 0, 0, 0, 0],            # row 0 (nonlinear part below)
        [-1, -1, -2, 1, 0, 2],         # row 1
        [-1, -1, -0.75, 1, 0, 2],      # row 2
        [0, 0, 1, 0, 0, -1],           # row 3
        [0, 0, 2, -1, 0, -2],          # row 4
        [0, 0, 0, -0.5, 1, 0],         # row 5
        [0, 0, 0, 0.2, -1, 0],         # row 6
        [0, 0, 0, 0, 0, 0],            # row 7 (exp)
        [0, 0, 0, 0, 0, 0],            # row 8 (exp)
        [0, 0, 1.25, 0, 0, 0],         # row 9
        [0, 0, 0, 1, 1, 0],            # row 10
        [0, 0, -2, 0, 0, 2],           # row 11
    ], dtype=float)

    def f(self, x):
        s = x[3] + x[4] + 1.0
        return float(self._lin @ x + np.exp(x[0]) + np.exp(x[1] / 1.2)
                     - 60.0 * np.log(s) + 140.0)

    def grad_f(self, x):
        s = x[3] + x[4] + 1.0
        gr = self._lin.copy()
        gr[0] += np.exp(x[0])
        gr[1] += np.exp(x[1] / 1.2) / 1.2
        gr[3] -= 60.0 / s
        gr[4] -= 60.0 / s
        return gr

    def hess_f(self, x):
        s = x[3] + x[4] + 1.0
        H = np.zeros((6, 6))
        H[0, 0] = np.exp(x[0])
        H[1, 1] = np.exp(x[1] / 1.2) / 1.44
        H[3:5, 3:5] = 60.0 / s**2
        return H

    def g(self, x):
        v = self._G_LIN @ x
        v[0] = -np.log(x[3] + x[4] + 1.0)
        v[7] = np.exp(x[0]) - 1.0
        v[8] = np.exp(x[1] / 1.2) - 1.0
        return v

    def jac_g(self, x):
        J = self._G_LIN.copy()
        s = x[3] + x[4] + 1.0
        J[0, 3] = J[0, 4] = -1.0 / s
        J[7, 0] = np.exp(x[0])
        J[8, 1] = np.exp(x[1] / 1.2) / 1.2
        return J

    def hess_g(self, x, w):
        s = x[3] + x[4] + 1.0
        H = np.zeros((6, 6))
        H[3:5, 3:5] = w[0] / s**2
        H[0, 0] = w[7] * np.exp(x[0])
        H[1, 1] = w[8] * np.exp(x[1] / 1.2) / 1.44
        return H


class ToyFacilityFunctions(ConvexFunctions):
    """Two-source supply toy with a quadratic capacity ring.

    x = (x1, x2, total).  Rows of g: x1 (capacity 1), x2 (capacity 2),
    demand - x1 - x2, x1^2 + x2^2 - r0.  The equality ties ``total`` to the
    two flows.  Several binary patterns are infeasible, so this family
    exercises feasibility cuts, which the case-study model never produces.
    """

    n, p, q = 3, 1, 4

    def __init__(self, target1: float, target2: float, demand: float, r0: float):
        self.target = np.array([target1, target2])
        self.demand = demand
        self.r0 = r0

    def signature(self) -> tuple:
        return (type(self).__name__, *self.target.tolist(), self.demand, self.r0)

    def f(self, x):
        d = x[:2] - self.target
        return float(d @ d + 0.1 * x[2] ** 2)

    def grad_f(self, x):
        return np.array([2 * (x[0] - self.target[0]), 2 * (x[1] - self.target[1]), 0.2 * x[2]])

    def hess_f(self, x):
        return np.diag([2.0, 2.0, 0.2])

    def h(self, x):
        return np.array([x[0] + x[1] - x[2]])

    def jac_h(self, x):
        return np.array([[1.0, 1.0, -1.0]])

    def g(self, x):
        return np.array([x[0], x[1], self.demand - x[0] - x[1], x[0] ** 2 + x[1] ** 2 - self.r0])

    def jac_g(self, x):
        return np.array([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-1.0, -1.0, 0.0],
            [2 * x[0], 2 * x[1], 0.0],
        ])

    def hess_g(self, x, w):
        return np.diag([2 * w[3], 2 * w[3], 0.0])


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    e: np.ndarray
    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    b: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    convex: ConvexFunctions
    E_mat: np.ndarray | None = None
    d: np.ndarray | None = None
    kind: str = "custom"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        arrays = {}
        for name in ("e", "A", "B", "K", "b", "x_lo", "x_hi"):
            arrays[name] = np.array(getattr(self, name), dtype=float)
        n = self.convex.n
        E_mat = np.zeros((0, n)) if self.E_mat is None else np.array(self.E_mat, dtype=float)
        d = np.zeros(0) if self.d is None else np.array(self.d, dtype=float)
        arrays["E_mat"], arrays["d"] = E_mat.reshape(-1, n), d.reshape(-1)
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

        m = self.e.shape[0]
        p, q = self.convex.p, self.convex.q
        checks = [
            (self.e.ndim == 1, "e must be a vector"),
            (self.A.shape == (p, m), f"A must be {p}x{m}, got {self.A.shape}"),
            (self.B.shape == (q, m), f"B must be {q}x{m}, got {self.B.shape}"),
            (self.K.ndim == 2 and self.K.shape[1] == m, "K must have m columns"),
            (self.b.shape == (self.K.shape[0],), "b must match K rows"),
            (self.x_lo.shape == (n,) and self.x_hi.shape == (n,), "bounds must have length n"),
            (bool(np.all(self.x_lo < self.x_hi)), "x_lo must be strictly below x_hi"),
            (bool(np.all(np.isfinite(self.x_lo)) and np.all(np.isfinite(self.x_hi))),
             "box bounds must be finite"),
            (self.E_mat.shape[0] == self.d.shape[0], "E and d disagree"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)

    @property
    def m(self) -> int:
        return self.e.shape[0]

    @property
    def n(self) -> int:
        return self.convex.n

    @property
    def p(self) -> int:
        return self.convex.p

    @property
    def q(self) -> int:
        return self.convex.q

    @property
    def s(self) -> int:
        return self.K.shape[0]

    def structure_key(self) -> tuple:
        """Everything that determines S(y) and F(y) except the y-cost vector e."""
        arrays = (self.A, self.B, self.K, self.b, self.x_lo, self.x_hi, self.E_mat, self.d)
        return (self.convex.signature(),) + tuple((a.shape, a.tobytes()) for a in arrays)

    def objective(self, x, y) -> float:
        return self.convex.f(x) + float(self.e @ y)

    def binary_feasible(self, y) -> bool:
        return bool(np.all(self.K @ np.asarray(y, dtype=float) <= self.b + 1e-9))

    def check_convexity(self, rng: np.random.Generator | None = None, n_pairs: int = 100,
                        tol: float = 1e-9) -> None:
        """Midpoint-convexity sampling check; raises ValidationError on a violation."""
        rng = np.random.default_rng(0) if rng is None else rng
        cf = self.convex
        for _ in range(n_pairs):
            x1 = rng.uniform(self.x_lo, self.x_hi)
            x2 = rng.uniform(self.x_lo, self.x_hi)
            xm = 0.5 * (x1 + x2)
            if cf.f(xm) > 0.5 * (cf.f(x1) + cf.f(x2)) + tol:
                raise ValidationError(f"f is not midpoint convex at {x1}, {x2}")
            if np.any(cf.g(xm) > 0.5 * (cf.g(x1) + cf.g(x2)) + tol):
                raise ValidationError(f"g is not midpoint convex at {x1}, {x2}")
            if cf.p and np.any(np.abs(cf.h(xm) - 0.5 * (cf.h(x1) + cf.h(x2))) > tol):
                raise ValidationError(f"h is not affine at {x1}, {x2}")

    def to_dict(self) -> dict:
        if self.kind not in _BUILDERS:
            raise ValidationError(f"instance kind {self.kind!r} cannot be serialized")
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "params": {k: _jsonable(v) for k, v in self.params.items()},
            "dims": {"m": self.m, "n": self.n, "p": self.p, "q": self.q, "s": self.s},
            "K": self.K.tolist(),
            "b": self.b.tolist(),
            "x_lo": self.x_lo.tolist(),
            "x_hi": self.x_hi.tolist(),
        }


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(u) for u in v]
    return v


class SchemaMismatch(ValidationError):
    pass


def instance_from_dict(doc: dict) -> ProblemInstance:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"unsupported instance schema {doc.get('schema_version')!r}")
    kind = doc.get("kind")
    if kind not in _BUILDERS:
        raise SchemaMismatch(f"unknown instance kind {kind!r}")
    inst = _BUILDERS[kind](doc["params"])
    stored = doc.get("dims", {})
    actual = {"m": inst.m, "n": inst.n, "p": inst.p, "q": inst.q, "s": inst.s}
    if stored and stored != actual:
        raise SchemaMismatch(f"dimension mismatch: file {stored}, kind {actual}")
    for key in ("K", "b", "x_lo", "x_hi"):
        if key in doc and not np.allclose(np.asarray(doc[key], dtype=float), getattr(inst, key)):
            raise SchemaMismatch(f"{key} in file disagrees with kind {kind!r}")
    return inst


# --------------------------------------------------------------------------
# case study 1

@dataclass(frozen=True)
class CaseStudyCoefficients:
    c1: int
    c2: int
    c3: int
    c4: int
    c5: int

    NOMINAL = (5, 8, 6, 10, 6)

    def __post_init__(self):
        vals = self.as_tuple()
        if any(int(v) != v for v in vals):
            raise ValidationError(f"coefficients must be integers, got {vals}")
        if any(not 1 <= v <= 39 for v in vals[:4]) or not 1 <= vals[4] <= 7:
            raise ValidationError(f"coefficients out of range: {vals}")

    def as_tuple(self) -> tuple[int, ...]:
        return (self.c1, self.c2, self.c3, self.c4, self.c5)

    @classmethod
    def nominal(cls) -> "CaseStudyCoefficients":
        return cls(*cls.NOMINAL)


def sample_coefficients(rng: np.random.Generator) -> CaseStudyCoefficients:
    c = rng.integers(1, 40, size=4)
    c5 = rng.integers(1, 8)
    return CaseStudyCoefficients(*(int(v) for v in c), int(c5))


def build_case_study1(c: CaseStudyCoefficients | tuple | list) -> ProblemInstance:
    if not isinstance(c, CaseStudyCoefficients):
        c = CaseStudyCoefficients(*c)
    B = np.zeros((12, 5))
    for row, j in zip(range(7, 12), range(5)):  # rows 7..11 couple y1..y5
        B[row, j] = -U_BIG
    K = np.array([[1, 1, 0, 0, 0], [-1, -1, 0, 0, 0], [0, 0, 0, 1, 1]], dtype=float)
    b = np.array([1.0, -1.0, 1.0])
    return ProblemInstance(
        e=np.array(c.as_tuple(), dtype=float),
        A=np.zeros((0, 5)),
        B=B,
        K=K,
        b=b,
        x_lo=np.zeros(6),
        x_hi=np.array([2.0, 2.0, 2.0, BOX_CAP, BOX_CAP, 3.0]),
        convex=CaseStudy1Functions(),
        kind="case_study1",
        params={"c": list(c.as_tuple())},
    )


# --------------------------------------------------------------------------
# toy facility family

def build_toy_facility(costs=(3.0, 4.0, 2.0), target1=1.5, target2=1.0, demand=2.4,
                       r0=4.0, r1=6.0, cap1=3.0, cap2=3.0) -> ProblemInstance:
    B = np.array([
        [-cap1, 0.0, 0.0],
        [0.0, -cap2, 0.0],
        [0.0, 0.0, 0.0],
        [0.0, 0.0, -r1],
    ])
    return ProblemInstance(
        e=np.asarray(costs, dtype=float),
        A=np.array([[0.0, 0.0, 0.5]]),
        B=B,
        K=np.array([[1.0, 1.0, 1.0]]),
        b=np.array([2.0]),
        x_lo=np.zeros(3),
        x_hi=np.full(3, 4.0),
        convex=ToyFacilityFunctions(target1, target2, demand, r0),
        kind="toy_facility",
        params=dict(costs=list(map(float, costs)), target1=target1, target2=target2,
                    demand=demand, r0=r0, r1=r1, cap1=cap1, cap2=cap2),
    )


def sample_toy_facility(rng: np.random.Generator) -> ProblemInstance:
    return build_toy_facility(
        costs=tuple(float(v) for v in rng.integers(1, 10, size=3)),
        target1=float(rng.uniform(0.5, 2.5)),
        target2=float(rng.uniform(0.5, 2.5)),
        demand=float(rng.uniform(2.1, 2.8)),
    )


_BUILDERS = {
    "case_study1": lambda params: build_case_study1(tuple(params["c"])),
    "toy_facility": lambda params: build_toy_facility(**params),
}


# --------------------------------------------------------------------------
# enumeration oracle

@dataclass
class BruteForceResult:
    status: str  # "optimal" or "infeasible"
    y: np.ndarray | None
    x: np.ndarray | None
    objective: float
    values: dict[tuple[int, ...], float]  # Z(y) for every feasible y

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"


class EnumerationLimit(ValueError):
    pass


def binary_points(m: int) -> np.ndarray:
    """All of {0,1}^m, rows in lexicographic order."""
    return np.array(list(itertools.product((0, 1), repeat=m)), dtype=np.int8).reshape(-1, m)


def brute_force_solve(inst: ProblemInstance, max_m: int = 20) -> BruteForceResult:
    from .nlp import NumericalFailure, SolveStatus, solve_subproblem

    if inst.m > max_m:
        raise EnumerationLimit(f"m={inst.m} exceeds enumeration guard {max_m}")
    best = None
    values = {}
    for y in binary_points(inst.m):
        if not inst.binary_feasible(y):
            continue
        sol = solve_subproblem(inst, y)
        if sol.status is SolveStatus.NUMERICAL_FAILURE:
            raise NumericalFailure(f"subproblem failed at y={y.tolist()}")
        if sol.status is not SolveStatus.FEASIBLE:
            continue
        values[tuple(int(v) for v in y)] = sol.objective
        if best is None or sol.objective < best[2]:
            best = (y.astype(float), sol.x, sol.objective)
    if best is None:
        return BruteForceResult("infeasible", None, None, float("inf"), values)
    return BruteForceResult("optimal", best[0], best[1], best[2], values)
