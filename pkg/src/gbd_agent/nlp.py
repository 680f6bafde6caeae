"""Fixed-y subproblems S(y) and F(y) by log-barrier path following.

Both subproblems share one formulation over z = (x, alpha), where alpha are
per-row slacks on the coupled inequalities ``g(x) + B y <= alpha``:

* F(y) minimizes ``sum(alpha)``;
* S(y) minimizes ``f(x) + e.y + rho * sum(alpha)`` (exact-penalty / elastic
  form).  With rho above the largest multiplier the optimum has alpha = 0 and
  coincides with S(y), while a strictly feasible start always exists even when
  the feasible set of S(y) has empty interior.

Equality rows ``h(x) + A y = 0`` (h affine) are handled by an infeasible-start
Newton method on the bordered KKT system.  The multipliers for the coupled
rows are read off the central path as ``1 / (t * slack)``.  On degenerate
faces (e.g. a binary switching a variable off pins it against its bound) the
central-path multipliers of S(y) scale with rho, so they are replaced by the
least-total KKT multipliers on the active set, found by a small LP.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .problem import ProblemInstance

log = logging.getLogger(__name__)

TOL_FEAS = 1e-6
TOL_COMP = 1e-5


class NumericalFailure(RuntimeError):
    pass


class SolveStatus(enum.Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class SubproblemSolution:
    status: SolveStatus
    y: np.ndarray
    x: np.ndarray
    objective: float
    lam: np.ndarray
    mu: np.ndarray
    iterations: int = 0
    wall_time: float = 0.0
    slack: float = 0.0  # sum(alpha) at the returned point
    # bound on how far x misses minimizing the Lagrangian over X; cut constants
    # are lowered by this much so that cuts stay valid
    cut_shift: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.status is SolveStatus.FEASIBLE


@dataclass
class BarrierSettings:
    t0: float = 1.0
    t_factor: float = 10.0
    gap_tol: float = 1e-8        # stop once (#rows)/t <= gap_tol
    newton_tol: float = 1e-10    # half squared Newton decrement, per stage
    max_newton: int = 200        # per barrier stage
    armijo: float = 1e-4
    backtrack: float = 0.5
    rho: float = 1e3             # elastic penalty; raised if too small
    rho_max: float = 1e6
    active_tol: float = 1e-8     # slack below which a row counts as active
    polish: bool = True
    verbose: bool = False


DEFAULT_SETTINGS = BarrierSettings()


class _Model:
    """Barrier model over z = (x, alpha)."""

    def __init__(self, inst: ProblemInstance, y: np.ndarray, penalty: float | None):
        self.inst = inst
        self.cf = inst.convex
        self.n, self.q = inst.n, inst.q
        self.nz = self.n + self.q
        self.Ay = inst.A @ y
        self.By = inst.B @ y
        self.ey = float(inst.e @ y)
        # penalty None -> feasibility objective sum(alpha)
        self.penalty = penalty
        n, q = self.n, self.q
        rows, rhs = [], []
        # -alpha <= 0
        L = np.zeros((q, self.nz))
        L[:, n:] = -np.eye(q)
        rows.append(L)
        rhs.append(np.zeros(q))
        # box
        Lb = np.zeros((2 * n, self.nz))
        Lb[:n, :n] = -np.eye(n)
        Lb[n:, :n] = np.eye(n)
        rows.append(Lb)
        rhs.append(np.concatenate([inst.x_lo, -inst.x_hi]))
        if inst.E_mat.shape[0]:
            Le = np.zeros((inst.E_mat.shape[0], self.nz))
            Le[:, :n] = inst.E_mat
            rows.append(Le)
            rhs.append(-inst.d)
        self.L = np.vstack(rows)
        self.l0 = np.concatenate(rhs)
        self.n_rows = q + self.L.shape[0]

    # objective -------------------------------------------------------------
    def obj(self, z):
        x, a = z[:self.n], z[self.n:]
        if self.penalty is None:
            return float(a.sum())
        return self.cf.f(x) + self.ey + self.penalty * float(a.sum())

    def obj_grad(self, z):
        gr = np.zeros(self.nz)
        if self.penalty is None:
            gr[self.n:] = 1.0
        else:
            gr[:self.n] = self.cf.grad_f(z[:self.n])
            gr[self.n:] = self.penalty
        return gr

    def obj_hess(self, z):
        H = np.zeros((self.nz, self.nz))
        if self.penalty is not None:
            H[:self.n, :self.n] = self.cf.hess_f(z[:self.n])
        return H

    # inequality rows, all of the form c(z) <= 0 ------------------------------
    def coupled(self, z):
        """g(x) + By - alpha."""
        return self.cf.g(z[:self.n]) + self.By - z[self.n:]

    def slacks(self, z):
        return np.concatenate([-self.coupled(z), -(self.L @ z + self.l0)])

    def row_jac(self, z):
        Jg = np.zeros((self.q, self.nz))
        Jg[:, :self.n] = self.cf.jac_g(z[:self.n])
        Jg[:, self.n:] = -np.eye(self.q)
        return np.vstack([Jg, self.L])

    # equality rows -----------------------------------------------------------
    def eq(self, z):
        x = z[:self.n]
        r = self.cf.h(x) + self.Ay
        Aeq = np.zeros((len(r), self.nz))
        if len(r):
            Aeq[:, :self.n] = self.cf.jac_h(x)
        return r, Aeq


class _LagrangianModel(_Model):
    """min over X of  [f(x)] + lam.h(x) + mu.g(x)  (no coupled rows)."""

    def __init__(self, inst: ProblemInstance, lam, mu, with_f: bool):
        super().__init__(inst, np.zeros(inst.m), penalty=None)
        self.lam, self.mu, self.with_f = lam, mu, with_f
        self.q = 0
        self.nz = self.n
        self.L = self.L[inst.q:, :self.n]  # drop the -alpha rows and alpha columns
        self.l0 = self.l0[inst.q:]
        self.n_rows = self.L.shape[0]

    def value(self, x):
        v = float(self.mu @ self.cf.g(x)) if len(self.mu) else 0.0
        if len(self.lam):
            v += float(self.lam @ self.cf.h(x))
        if self.with_f:
            v += self.cf.f(x)
        return v

    def obj(self, z):
        return self.value(z)

    def obj_grad(self, z):
        gr = self.cf.jac_g(z).T @ self.mu if len(self.mu) else np.zeros(self.n)
        if len(self.lam):
            gr = gr + self.cf.jac_h(z).T @ self.lam
        if self.with_f:
            gr = gr + self.cf.grad_f(z)
        return gr

    def obj_hess(self, z):
        H = self.cf.hess_g(z, self.mu) if len(self.mu) else np.zeros((self.n, self.n))
        if self.with_f:
            H = H + self.cf.hess_f(z)
        return H

    def coupled(self, z):
        return np.zeros(0)

    def slacks(self, z):
        return -(self.L @ z + self.l0)

    def row_jac(self, z):
        return self.L

    def eq(self, z):
        return np.zeros(0), np.zeros((0, self.n))


def _lagrangian_shift(inst, sol: SubproblemSolution, with_f: bool,
                      settings: BarrierSettings) -> float:
    """Exact L(x) - min_X L for the solution's multipliers (>= 0)."""
    model = _LagrangianModel(inst, sol.lam, sol.mu, with_f)
    try:
        z, _, t, _ = _barrier(model, _interior_x(inst, settings), settings)
    except NumericalFailure:
        return sol.cut_shift  # keep the first-order bound
    lower = model.value(z) - model.n_rows / t
    return max(0.0, model.value(sol.x) - lower)


def _psi(model: _Model, z, t):
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        s = model.slacks(z)
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        return np.inf
    val = model.obj(z) - np.log(s).sum() / t
    return val if np.isfinite(val) else np.inf


def _derivs(model: _Model, z, t):
    s = model.slacks(z)
    J = model.row_jac(z)
    inv = 1.0 / s
    grad = model.obj_grad(z) + J.T @ inv / t
    Jw = J * (inv / np.sqrt(t))[:, None]
    H = model.obj_hess(z) + Jw.T @ Jw
    w = inv[:model.q] / t  # central-path multipliers of the coupled rows
    if model.q:
        H[:model.n, :model.n] += model.cf.hess_g(z[:model.n], w)
    return grad, H


def _newton_step(H, grad, Aeq, r):
    p = Aeq.shape[0]
    nz = H.shape[0]
    if p == 0:
        try:
            return np.linalg.solve(H, -grad), np.zeros(0)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H, -grad, rcond=None)[0], np.zeros(0)
    KKT = np.zeros((nz + p, nz + p))
    KKT[:nz, :nz] = H
    KKT[:nz, nz:] = Aeq.T
    KKT[nz:, :nz] = Aeq
    rhs = np.concatenate([-grad, -r])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
    return sol[:nz], sol[nz:]


def _barrier(model: _Model, z0: np.ndarray, settings: BarrierSettings):
    """Path-follow from a strictly feasible z0.  Returns (z, nu, t, newton_steps)."""
    z = z0.copy()
    t = settings.t0
    nu = np.zeros(model.inst.p)
    total = 0
    final = False
    last_ok = None
    while True:
        final = model.n_rows / t <= settings.gap_tol
        converged = False
        for _ in range(settings.max_newton):
            grad, H = _derivs(model, z, t)
            r, Aeq = model.eq(z)
            dz, nu_new = _newton_step(H, grad, Aeq, r)
            total += 1
            if not np.all(np.isfinite(dz)):
                raise NumericalFailure("non-finite Newton direction")
            primal_ok = np.linalg.norm(r) <= 1e-10 * (1.0 + np.linalg.norm(model.Ay))
            if primal_ok:
                dec = float(-grad @ dz)
                if dec / 2.0 <= settings.newton_tol:
                    nu = nu_new
                    converged = True
                    break
                phi0 = _psi(model, z, t)
                step = 1.0
                while step > 1e-14:
                    if _psi(model, z + step * dz, t) <= phi0 - settings.armijo * step * dec:
                        break
                    step *= settings.backtrack
                else:
                    # numerical floor: no measurable decrease left.  At large t
                    # roundoff in psi hides decrements whose objective effect
                    # (about dec / t) is already negligible.
                    nu = nu_new
                    converged = dec / 2.0 <= 1e-6 or dec / t <= 1e-12
                    break
            else:
                res0 = np.linalg.norm(np.concatenate([grad + Aeq.T @ nu_new, r]))
                step = 1.0
                while step > 1e-14:
                    zt = z + step * dz
                    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
                        inside = np.all(model.slacks(zt) > 0)
                    if inside:
                        gt, _ = _derivs(model, zt, t)
                        rt, At = model.eq(zt)
                        res = np.linalg.norm(np.concatenate([gt + At.T @ nu_new, rt]))
                        if res <= (1 - settings.armijo * step) * res0:
                            break
                    step *= settings.backtrack
                else:
                    raise NumericalFailure("equality residual line search stalled")
            z = z + step * dz
            nu = nu_new
        if settings.verbose:
            log.debug(json.dumps({"t": t, "newton": total, "obj": model.obj(z)}))
        if final:
            if converged:
                return z, nu, t, total
            # ill-conditioned last stage (typically a flat optimal face): settle
            # for the previous centred point if its gap bound is close enough
            if last_ok is not None and model.n_rows / last_ok[2] <= 100 * settings.gap_tol:
                return last_ok[0], last_ok[1], last_ok[2], total
            raise NumericalFailure(f"Newton did not converge at t={t:g}")
        last_ok = (z.copy(), nu.copy(), t) if converged else None
        t *= settings.t_factor


def _interior_x(inst: ProblemInstance, settings: BarrierSettings) -> np.ndarray:
    """A point strictly inside the box and the polyhedral rows E x <= d."""
    x = 0.5 * (inst.x_lo + inst.x_hi)
    if inst.E_mat.shape[0] == 0 or np.all(inst.E_mat @ x < inst.d):
        return x
    # phase 1 on X: min sigma s.t. E x - d <= sigma, box; stop as soon as sigma < 0
    n = inst.n
    width = inst.x_hi - inst.x_lo
    sigma = float(np.max(inst.E_mat @ x - inst.d)) + 1.0
    z = np.concatenate([x, [sigma]])
    t = 1.0
    for _ in range(60):
        L = np.vstack([
            np.hstack([inst.E_mat, -np.ones((inst.E_mat.shape[0], 1))]),
            np.hstack([-np.eye(n), np.zeros((n, 1))]),
            np.hstack([np.eye(n), np.zeros((n, 1))]),
        ])
        l0 = np.concatenate([-inst.d, inst.x_lo, -inst.x_hi])
        for _ in range(50):
            s = -(L @ z + l0)
            c = np.zeros(n + 1)
            c[-1] = 1.0
            grad = c + L.T @ (1.0 / s) / t
            Lw = L / (s * np.sqrt(t))[:, None]
            dz = np.linalg.lstsq(Lw.T @ Lw + 1e-12 * np.eye(n + 1), -grad, rcond=None)[0]
            step = 1.0
            while np.any(-(L @ (z + step * dz) + l0) <= 0):
                step *= 0.5
            z = z + 0.99 * step * dz
            if z[-1] < -1e-3 * max(1.0, float(width.min())):
                return z[:n]
        t *= 10.0
    raise NumericalFailure("polyhedral part of X appears to be empty")


def _start(model: _Model, x0: np.ndarray) -> np.ndarray:
    G = model.cf.g(x0) + model.By
    alpha = np.maximum(G, 0.0) + 1.0
    return np.concatenate([x0, alpha])


def _solution(model: _Model, y, z, nu, t, steps, elapsed, status) -> SubproblemSolution:
    x = z[:model.n].copy()
    alpha = z[model.n:]
    mu = 1.0 / (t * -model.coupled(z))
    if model.penalty is None:
        objective = float(alpha.sum())
    else:
        objective = model.inst.objective(x, y)
    return SubproblemSolution(status=status, y=np.asarray(y, dtype=float).copy(), x=x,
                              objective=objective, lam=np.asarray(nu, dtype=float).copy(),
                              mu=mu, iterations=steps, wall_time=elapsed,
                              slack=float(alpha.sum()))


def _polish(model: _Model, z: np.ndarray, settings: BarrierSettings):
    """Try the active-set LP at the configured tolerance, then a looser one."""
    for tol in (settings.active_tol, 100.0 * settings.active_tol):
        out = _polish_multipliers(model, z, tol)
        if out is not None:
            return out
    return None


def _polish_multipliers(model: _Model, z: np.ndarray, tol: float):
    """Least-total KKT multipliers (lambda, mu, cut_shift) at the primal point z.

    Only rows with slack below ``tol`` may carry a multiplier, so
    complementarity holds to that tolerance.  For F(y) the alpha-stationarity
    conditions pin mu_i = 1 on violated rows and mu_i <= 1 elsewhere.  A
    stationarity residual r is tolerated up to a small bound; by convexity the
    Lagrangian at x then lies within sum(|r_j| * width_j) of its minimum over
    the box, which is returned as the cut shift.  Returns None when the LP
    cannot get that close.
    """
    inst, cf = model.inst, model.cf
    n, p = model.n, inst.p
    x, alpha = z[:n], z[n:]
    feas_mode = model.penalty is None
    G = cf.g(x) + model.By
    act = np.flatnonzero(G - alpha >= -tol)
    lo = np.flatnonzero(x - inst.x_lo <= tol)
    hi = np.flatnonzero(inst.x_hi - x <= tol)
    e_act = np.flatnonzero(inst.d - inst.E_mat @ x <= tol) if inst.E_mat.shape[0] else np.zeros(0, int)
    eye = np.eye(n)
    A_eq = np.hstack([
        cf.jac_g(x)[act].T,
        -eye[:, lo],
        eye[:, hi],
        inst.E_mat[e_act].T if len(e_act) else np.zeros((n, 0)),
        cf.jac_h(x).T if p else np.zeros((n, 0)),
        eye,
        -eye,
    ])
    grad = np.zeros(n) if feas_mode else cf.grad_f(x)
    k_mu, k_nu = len(act), len(lo) + len(hi) + len(e_act)
    if feas_mode:
        mu_bounds = [(1.0, 1.0) if alpha[i] > tol else (0.0, 1.0) for i in act]
        if np.any(np.delete(alpha, act) > tol):
            return None  # a violated row must be active in F(y)
    else:
        mu_bounds = [(0.0, None)] * k_mu
    cost = np.concatenate([np.ones(k_mu), np.zeros(k_nu + p), np.full(2 * n, 1e6)])
    bounds = mu_bounds + [(0.0, None)] * k_nu + [(None, None)] * p + [(0.0, None)] * (2 * n)
    res = linprog(cost, A_eq=A_eq, b_eq=-grad, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    v = res.x
    resid = v[k_mu + k_nu + p:k_mu + k_nu + p + n] - v[k_mu + k_nu + p + n:]
    if np.max(np.abs(resid), initial=0.0) > 1e-4 * (1.0 + np.abs(grad).max(initial=0.0)):
        return None
    mu = np.zeros(model.q)
    mu[act] = v[:k_mu]
    lam = v[k_mu + k_nu:k_mu + k_nu + p]
    shift = float(np.abs(resid) @ (inst.x_hi - inst.x_lo))
    return lam, mu, shift


def _check_y(inst, y):
    y = np.asarray(y, dtype=float)
    if y.shape != (inst.m,) or not np.all((y == 0) | (y == 1)):
        raise ValueError(f"y must be a binary vector of length {inst.m}, got {y}")
    return y


def solve_feasibility(inst: ProblemInstance, y, settings: BarrierSettings = DEFAULT_SETTINGS,
                      x0: np.ndarray | None = None) -> SubproblemSolution:
    """F(y): minimize total violation of the coupled inequality rows."""
    y = _check_y(inst, y)
    started = time.monotonic()
    model = _Model(inst, y, penalty=None)
    x0 = _interior_x(inst, settings) if x0 is None else x0
    try:
        z, nu, t, steps = _barrier(model, _start(model, x0), settings)
    except NumericalFailure as exc:
        log.warning("F(y) failed at y=%s: %s", y.tolist(), exc)
        return SubproblemSolution(SolveStatus.NUMERICAL_FAILURE, y, x0, float("nan"),
                                  np.zeros(inst.p), np.zeros(inst.q),
                                  wall_time=time.monotonic() - started)
    sol = _solution(model, y, z, nu, t, steps, time.monotonic() - started, SolveStatus.FEASIBLE)
    if sol.objective > TOL_FEAS:
        sol.status = SolveStatus.INFEASIBLE
    if settings.polish:
        polished = _polish(model, z, settings)
        if polished is not None:
            sol.lam, sol.mu, sol.cut_shift = polished
            if sol.cut_shift > 1e-9:
                sol.cut_shift = _lagrangian_shift(inst, sol, False, settings)
    sol.wall_time = time.monotonic() - started
    return sol


def solve_subproblem(inst: ProblemInstance, y, settings: BarrierSettings = DEFAULT_SETTINGS
                     ) -> SubproblemSolution:
    """S(y).

    Returns FEASIBLE with (x, lambda, mu) or, when S(y) has no feasible point,
    an INFEASIBLE solution carrying the F(y) optimum (x-bar, lambda-bar,
    mu-bar, objective = total slack), ready for a feasibility cut.
    """
    y = _check_y(inst, y)
    started = time.monotonic()
    steps = 0
    x0 = _interior_x(inst, settings)
    rho = settings.rho
    while True:
        model = _Model(inst, y, penalty=rho)
        try:
            z, nu, t, n_it = _barrier(model, _start(model, x0), settings)
        except NumericalFailure as exc:
            # typically a flat optimal face in an infeasible S(y); F(y) decides
            log.debug("elastic S(y) failed at y=%s: %s", y.tolist(), exc)
            z = None
            steps += settings.max_newton
        if z is not None:
            steps += n_it
            sol = _solution(model, y, z, nu, t, steps, 0.0, SolveStatus.FEASIBLE)
            viol = np.max(inst.convex.g(sol.x) + model.By, initial=-np.inf)
        if z is not None and sol.slack <= TOL_FEAS and viol <= TOL_FEAS:
            if settings.polish:
                polished = _polish(model, z, settings)
                if polished is not None:
                    sol.lam, sol.mu, sol.cut_shift = polished
                    if sol.cut_shift > 1e-9:
                        sol.cut_shift = _lagrangian_shift(inst, sol, True, settings)
            sol.wall_time = time.monotonic() - started
            return sol
        feas = solve_feasibility(inst, y, settings, x0=x0)
        steps += feas.iterations
        if feas.status is not SolveStatus.FEASIBLE:
            feas.iterations = steps
            feas.wall_time = time.monotonic() - started
            return feas
        # feasible after all: the penalty was too weak to force alpha to zero
        rho *= 10.0
        if rho > settings.rho_max:
            return SubproblemSolution(SolveStatus.NUMERICAL_FAILURE, y, feas.x, float("nan"),
                                      np.zeros(inst.p), np.zeros(inst.q), iterations=steps,
                                      wall_time=time.monotonic() - started)


class SubproblemCache:
    """Memo of subproblem solutions shared by instances that differ only in e.

    For fixed y the cost e.y is a constant, so x, the multipliers and the
    solver statistics carry over; only the objective is recomputed.
    """

    def __init__(self):
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def solve(self, inst: ProblemInstance, y, settings: BarrierSettings = DEFAULT_SETTINGS
              ) -> SubproblemSolution:
        y = _check_y(inst, y)
        key = (inst.structure_key(), y.tobytes(), repr(settings))
        cached = self._store.get(key)
        if cached is None:
            self.misses += 1
            cached = solve_subproblem(inst, y, settings)
            self._store[key] = cached
        else:
            self.hits += 1
        sol = dataclasses.replace(cached, y=y.copy(), x=cached.x.copy(), lam=cached.lam.copy(),
                                  mu=cached.mu.copy())
        if sol.status is SolveStatus.FEASIBLE:
            sol.objective = inst.objective(sol.x, y)
        return sol
