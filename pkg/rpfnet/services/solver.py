"""Primal-dual interior-point solver for (regularized) proportional fairness.

    minimize   -sum_i w_i log(v_i^T a_i) + <a, z>
    subject to 0 <= a <= x,  sum_i a_im <= b_m

Entries that can never be positive (x_im = 0 or b_m = 0) are fixed to zero
and dropped before the Newton iterations; their duals are recovered from
stationarity afterwards.  Inequalities are stacked as E y <= f with row
blocks  [-I ; I ; D]  so the multipliers come out as (mu, nu, lambda).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as scil

from .problem import ProblemInstance
from ..models import SolverConfig

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class InfeasibleInteriorError(SolverError):
    """No feasible point gives every weighted active agent positive utility."""


class MaxIterationsExceeded(SolverError):
    def __init__(self, message: str, best: "PFSolution"):
        super().__init__(message)
        self.best = best


@dataclass
class PFSolution:
    allocation: np.ndarray        # a*, N x M
    dual_lower: np.ndarray        # mu*, N x M (a >= 0)
    dual_upper: np.ndarray        # nu*, N x M (a <= x)
    dual_budget: np.ndarray       # lambda*, M (Da <= b)
    objective: float
    kkt_residual: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "allocation": self.allocation.tolist(),
            "dual_lower": self.dual_lower.tolist(),
            "dual_upper": self.dual_upper.tolist(),
            "dual_budget": self.dual_budget.tolist(),
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
        }


def _regularizer(inst: ProblemInstance, z: Optional[np.ndarray]) -> np.ndarray:
    if z is None:
        return np.zeros_like(inst.values)
    z = np.asarray(z, dtype=float)
    if z.shape != inst.values.shape:
        z = z.reshape(inst.values.shape)
    if not np.all(np.isfinite(z)):
        raise ValueError("regularizer z must be finite")
    return z


def _logged_agents(inst: ProblemInstance) -> np.ndarray:
    """Agents whose log-utility term enters the objective."""
    return inst.active & (inst.weights > 0)


# ── Residuals ───────────────────────────────────────────────────────────

def kkt_residual(sol: PFSolution, inst: ProblemInstance, z: Optional[np.ndarray] = None) -> float:
    """Max violation over stationarity, feasibility, dual sign and slackness."""
    z = _regularizer(inst, z)
    a, mu, nu, lam = sol.allocation, sol.dual_lower, sol.dual_upper, sol.dual_budget
    v, x, b, w = inst.values, inst.demands, inst.budgets, inst.weights
    u = np.sum(v * a, axis=1)
    logged = _logged_agents(inst)
    if np.any(u[logged] <= 0):
        return float("inf")

    scale = np.ones(inst.n_agents)
    scale[logged] = u[logged]
    coef = np.zeros(inst.n_agents)
    coef[logged] = w[logged]
    # (mu - nu - lambda - z) u_i + w_i v_i = 0, and the same divided by u_i
    scaled = (mu - nu - lam[None, :] - z) * scale[:, None] + coef[:, None] * v
    plain = scaled / scale[:, None]

    col = a.sum(axis=0)
    parts = [
        np.abs(scaled), np.abs(plain),
        np.maximum(-a, 0), np.maximum(a - x, 0), np.maximum(col - b, 0),
        np.maximum(-mu, 0), np.maximum(-nu, 0), np.maximum(-lam, 0),
        np.abs(mu * a), np.abs(nu * (a - x)), np.abs(lam * (col - b)),
    ]
    return float(max(np.max(p) if p.size else 0.0 for p in parts))


# ── Interior-point iterations ───────────────────────────────────────────

class _Reduced:
    """Free-variable view of the program: y = a[free]."""

    def __init__(self, inst: ProblemInstance, z: np.ndarray):
        n, m = inst.values.shape
        self.inst = inst
        self.free = (inst.demands > 0) & (inst.budgets[None, :] > 0)
        self.agent, self.resource = np.nonzero(self.free)
        self.n = self.agent.size
        self.vals = inst.values[self.free]
        self.upper = inst.demands[self.free]
        self.lin = z[self.free]
        self.logged = _logged_agents(inst)
        self.w = np.where(self.logged, inst.weights, 0.0)

        self.budget_rows = np.unique(self.resource)
        D = np.zeros((self.budget_rows.size, self.n))
        for r, res in enumerate(self.budget_rows):
            D[r, self.resource == res] = 1.0
        eye = np.eye(self.n)
        self.E = np.vstack([-eye, eye, D])
        self.f = np.concatenate([np.zeros(self.n), self.upper, inst.budgets[self.budget_rows]])
        self.n_agents = n

    def start(self) -> np.ndarray:
        counts = np.bincount(self.resource, minlength=self.inst.n_resources)
        share = self.inst.budgets[self.resource] / counts[self.resource]
        return 0.5 * np.minimum(self.upper, share)

    def utilities(self, y: np.ndarray) -> np.ndarray:
        return np.bincount(self.agent, weights=self.vals * y, minlength=self.n_agents)

    def objective(self, y: np.ndarray) -> float:
        u = self.utilities(y)
        lg = self.logged
        return float(-np.sum(self.w[lg] * np.log(u[lg])) + self.lin @ y)

    def gradient(self, y: np.ndarray) -> np.ndarray:
        u = self.utilities(y)
        inv = np.zeros_like(u)
        inv[self.logged] = self.w[self.logged] / u[self.logged]
        return -inv[self.agent] * self.vals + self.lin

    def hessian(self, y: np.ndarray) -> np.ndarray:
        u = self.utilities(y)
        coef = np.zeros_like(u)
        coef[self.logged] = self.w[self.logged] / u[self.logged] ** 2
        same = self.agent[:, None] == self.agent[None, :]
        return same * coef[self.agent][:, None] * np.outer(self.vals, self.vals)


def _newton_direction(H: np.ndarray, E: np.ndarray, l: np.ndarray, s: np.ndarray,
                      rd: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    K = H + E.T @ ((l / s)[:, None] * E)
    rhs = -rd - E.T @ ((tau - l * s) / s)
    try:
        dy = scil.cho_solve(scil.cho_factor(K, lower=True), rhs)
    except scil.LinAlgError:
        dy = scil.lstsq(K, rhs)[0]
    dl = (tau - l * s + l * (E @ dy)) / s
    return dy, dl


def _max_step(vec: np.ndarray, d: np.ndarray) -> float:
    neg = d < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-vec[neg] / d[neg])))


def _assemble(red: _Reduced, y: np.ndarray, l: np.ndarray, z: np.ndarray,
              iterations: int) -> PFSolution:
    inst = red.inst
    n, m = inst.values.shape
    a = np.zeros((n, m))
    mu = np.zeros((n, m))
    nu = np.zeros((n, m))
    lam = np.zeros(m)
    a[red.free] = y
    mu[red.free] = l[:red.n]
    nu[red.free] = l[red.n:2 * red.n]
    lam[red.budget_rows] = l[2 * red.n:]

    # Fixed entries: choose (mu, nu) >= 0 that zero the stationarity residual.
    u = np.sum(inst.values * a, axis=1)
    inv = np.zeros(n)
    inv[red.logged] = red.w[red.logged] / u[red.logged]
    # b_m = 0: the budget multiplier absorbs the largest marginal gain so that
    # every entry of the column ends up with mu >= 0 and nu = 0.
    closed = inst.budgets <= 0
    if np.any(closed):
        gain = inv[:, None] * inst.values - z
        lam[closed] = np.maximum(gain[:, closed], 0.0).max(axis=0)
    station = -inv[:, None] * inst.values + z + lam[None, :]
    fixed = ~red.free
    mu[fixed] = np.maximum(station[fixed], 0.0)
    nu[fixed] = np.maximum(-station[fixed], 0.0)

    obj = red.objective(y) if red.n else 0.0
    sol = PFSolution(a, mu, nu, lam, obj, 0.0, iterations)
    sol.kkt_residual = kkt_residual(sol, inst, z)
    return sol


def solve_regularized_pf(inst: ProblemInstance, z: Optional[np.ndarray] = None,
                         cfg: Optional[SolverConfig] = None) -> PFSolution:
    cfg = cfg or SolverConfig()
    z = _regularizer(inst, z)
    red = _Reduced(inst, z)

    has_free = np.bincount(red.agent, minlength=inst.n_agents) > 0
    stuck = red.logged & ~has_free
    if np.any(stuck):
        raise InfeasibleInteriorError(
            f"agents {np.flatnonzero(stuck).tolist()} cannot receive positive utility")
    if red.n == 0:
        return _assemble(red, np.zeros(0), np.zeros(0), z, 0)

    E, f = red.E, red.f
    nz = f.size
    y = red.start()
    s = f - E @ y
    l = cfg.initial_barrier / s
    best: Optional[PFSolution] = None

    for k in range(cfg.max_iterations + 1):
        sol = _assemble(red, y, l, z, k)
        if best is None or sol.kkt_residual < best.kkt_residual:
            best = sol
        if sol.kkt_residual <= cfg.tolerance:
            log.debug("PF solve done  iters=%d  residual=%.2e", k, sol.kkt_residual)
            return sol
        if k == cfg.max_iterations:
            break

        g = red.gradient(y)
        rd = g + E.T @ l
        gap = float(l @ s) / nz
        tau = cfg.barrier_decrease * gap
        H = red.hessian(y)
        ok = np.all(s > 0) and np.all(np.isfinite(H)) and np.all(np.isfinite(rd))
        if ok:
            dy, dl = _newton_direction(H, E, l, s, rd, tau)
            ok = np.all(np.isfinite(dy)) and np.all(np.isfinite(dl))
        if not ok:
            log.warning("PF solve lost the interior at iter=%d  best_residual=%.2e",
                        k, best.kkt_residual)
            raise MaxIterationsExceeded(
                f"interior lost after {k} iterations (residual {best.kkt_residual:.2e})", best)
        ds = -E @ dy

        alpha = 0.99 * min(_max_step(s, ds), _max_step(l, dl))
        if alpha >= 0.99:
            alpha = 1.0 if np.all(s + ds > 0) and np.all(l + dl > 0) else alpha
        merit = np.linalg.norm(np.concatenate([rd, l * s - tau]))
        while alpha > 1e-10:
            y_new, l_new = y + alpha * dy, l + alpha * dl
            s_new = f - E @ y_new
            rd_new = red.gradient(y_new) + E.T @ l_new
            merit_new = np.linalg.norm(np.concatenate([rd_new, l_new * s_new - tau]))
            if merit_new <= (1.0 - 0.01 * alpha) * merit:
                break
            alpha *= 0.5
        y, l = y + alpha * dy, l + alpha * dl
        s = f - E @ y

    log.warning("PF solve hit max_iterations=%d  best_residual=%.2e",
                cfg.max_iterations, best.kkt_residual)
    raise MaxIterationsExceeded(
        f"no convergence to {cfg.tolerance:g} in {cfg.max_iterations} iterations", best)


def solve_pf(inst: ProblemInstance, cfg: Optional[SolverConfig] = None) -> PFSolution:
    return solve_regularized_pf(inst, None, cfg)
