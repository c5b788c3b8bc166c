"""Sensitivities of the PF / regularized-PF solution through its KKT system.

Unknown ordering of the linearized system is [da, dmu, dnu, dlambda] with
da, dmu, dnu agent-major (index i*M + m).  Block layout of M:

    [ M1            M2       -M2          -M3            ]
    [ diag(mu)      diag(a)   0            0             ]
    [ diag(nu)      0         diag(a - x)  0             ]
    [ diag(lam) D   0         0            diag(Da - b)  ]

Downstream gradients use one transposed solve  M^T g = [dl/da; 0; 0; 0].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg as scil

from .problem import ProblemInstance, _check_agent
from .solver import PFSolution
from ..config import settings

log = logging.getLogger(__name__)


class UnconvergedSolutionError(ValueError):
    pass


class VariantMismatchError(ValueError):
    """Regularizer gradient requested from a system built without z."""


class FactorizationError(RuntimeError):
    pass


class Differentiability(str, Enum):
    DIFFERENTIABLE = "differentiable"
    SUBDIFFERENTIABLE = "subdifferentiable"


@dataclass
class KKTSystem:
    matrix: np.ndarray
    regularized: bool
    solution: PFSolution
    instance: ProblemInstance
    z: np.ndarray
    scale: np.ndarray = field(repr=False)  # per-agent multiplier of the stationarity rows

    @property
    def nm(self) -> int:
        return self.instance.n_agents * self.instance.n_resources

    @cached_property
    def svd(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        try:
            return scil.svd(self.matrix)
        except (scil.LinAlgError, ValueError) as e:
            raise FactorizationError(f"SVD of KKT matrix failed: {e}") from e

    @property
    def singular(self) -> bool:
        s = self.svd[1]
        return bool(s[-1] <= settings.singular_threshold * s[0])


@dataclass
class AdjointSolution:
    g_a: np.ndarray
    g_mu: np.ndarray
    g_nu: np.ndarray
    g_lambda: np.ndarray
    min_norm: bool
    residual: float


def _pinned(inst: ProblemInstance) -> np.ndarray:
    return (inst.demands <= 0) | (inst.budgets[None, :] <= 0)


def _stationarity_scale(sol: PFSolution, inst: ProblemInstance) -> tuple[np.ndarray, np.ndarray]:
    """(logged mask, row scale): u_i for logged agents, 1 otherwise."""
    logged = inst.active & (inst.weights > 0)
    u = np.sum(inst.values * sol.allocation, axis=1)
    return logged, np.where(logged, u, 1.0)


def build_kkt_matrix(sol: PFSolution, inst: ProblemInstance,
                     z: Optional[np.ndarray] = None) -> KKTSystem:
    if sol.kkt_residual > settings.kkt_build_threshold:
        raise UnconvergedSolutionError(
            f"solution residual {sol.kkt_residual:.2e} above {settings.kkt_build_threshold:g}")
    n, m = inst.values.shape
    nm = n * m
    regularized = z is not None
    zz = np.zeros((n, m)) if z is None else np.asarray(z, dtype=float).reshape(n, m)

    a = sol.allocation.ravel()
    mu = sol.dual_lower.ravel()
    nu = sol.dual_upper.ravel()
    lam = sol.dual_budget
    x = inst.demands.ravel()
    logged, scale = _stationarity_scale(sol, inst)

    D = np.kron(np.ones((1, n)), np.eye(m))          # M x NM
    M1 = np.zeros((nm, nm))
    for i in np.flatnonzero(logged):
        sl = slice(i * m, (i + 1) * m)
        coef = sol.dual_lower[i] - sol.dual_upper[i] - lam - zz[i]
        M1[sl, sl] = np.outer(coef, inst.values[i])
    M2 = np.diag(np.repeat(scale, m))
    M3 = np.kron(scale[:, None], np.eye(m))          # NM x M

    size = 3 * nm + m
    K = np.zeros((size, size))
    r1, r2, r3 = slice(0, nm), slice(nm, 2 * nm), slice(2 * nm, 3 * nm)
    r4 = slice(3 * nm, size)
    K[r1, r1] = M1
    K[r1, r2] = M2
    K[r1, r3] = -M2
    K[r1, r4] = -M3
    K[r2, r1] = np.diag(mu)
    K[r2, r2] = np.diag(a)
    K[r3, r1] = np.diag(nu)
    K[r3, r3] = np.diag(a - x)
    K[r4, r1] = lam[:, None] * D
    K[r4, r4] = np.diag(D @ a - inst.budgets)

    # Eliminated entries (zero demand or zero budget) leave identically zero
    # complementarity rows; pin their multiplier differentials instead.
    pinned = np.flatnonzero(_pinned(inst).ravel())
    for row_block in (nm, 2 * nm):
        for k in pinned:
            r = row_block + k
            if not np.any(K[r]):
                K[r, r] = 1.0
    for mm in np.flatnonzero(inst.budgets <= 0):
        r = 3 * nm + mm
        if not np.any(K[r]):
            K[r, r] = 1.0

    return KKTSystem(K, regularized, sol, inst, zz, scale)


def check_differentiability(sol: PFSolution, inst: ProblemInstance,
                            tol: float = settings.tight_tolerance) -> Differentiability:
    """Tight-constraint count plus strict complementary slackness test."""
    n, m = inst.values.shape
    a, x = sol.allocation, inst.demands
    pinned = _pinned(inst)
    col_slack = inst.budgets - a.sum(axis=0)

    lower_tight = np.abs(a) <= tol
    upper_tight = np.abs(x - a) <= tol
    budget_tight = np.abs(col_slack) <= tol
    tight = int(lower_tight.sum() + upper_tight.sum() + budget_tight.sum())

    free = ~pinned
    strict = True
    for tight_mask, dual in ((lower_tight, sol.dual_lower), (upper_tight, sol.dual_upper)):
        t, d = tight_mask[free], dual[free]
        strict &= bool(np.all(d[t] > tol) and np.all(d[~t] < tol))
    live = inst.budgets > 0
    t, d = budget_tight[live], sol.dual_budget[live]
    strict &= bool(np.all(d[t] > tol) and np.all(d[~t] < tol))

    ok = tight >= n * m - n and strict
    log.debug("Differentiability  tight=%d  need=%d  strict=%s", tight, n * m - n, strict)
    return Differentiability.DIFFERENTIABLE if ok else Differentiability.SUBDIFFERENTIABLE


def solve_adjoint(sys: KKTSystem, upstream: np.ndarray) -> AdjointSolution:
    nm = sys.nm
    up = np.asarray(upstream, dtype=float).ravel()
    if up.size != nm:
        raise ValueError(f"upstream must have length {nm}, got {up.size}")
    rhs = np.zeros(sys.matrix.shape[0])
    rhs[:nm] = up

    U, s, Vt = sys.svd
    if sys.singular:
        keep = s > settings.singular_threshold * s[0]
        # M = U S V^T  =>  pinv(M^T) = U_r S_r^-1 V_r^T
        g = U[:, keep] @ ((Vt[keep] @ rhs) / s[keep])
        min_norm = True
        log.debug("KKT matrix singular (rank %d of %d), using min-norm adjoint",
                  int(keep.sum()), s.size)
    else:
        g = U @ ((Vt @ rhs) / s)
        min_norm = False
    residual = float(np.max(np.abs(sys.matrix.T @ g - rhs))) if rhs.size else 0.0
    return AdjointSolution(
        g_a=g[:nm], g_mu=g[nm:2 * nm], g_nu=g[2 * nm:3 * nm], g_lambda=g[3 * nm:],
        min_norm=min_norm, residual=residual,
    )


def forward_differential(sys: KKTSystem, dv: Optional[np.ndarray] = None,
                         dx: Optional[np.ndarray] = None, dw: Optional[np.ndarray] = None,
                         dz: Optional[np.ndarray] = None) -> np.ndarray:
    """da for given input differentials, by solving M d = h (min-norm if singular)."""
    inst, sol = sys.instance, sys.solution
    n, m = inst.values.shape
    nm = n * m
    dv = np.zeros((n, m)) if dv is None else np.asarray(dv, dtype=float).reshape(n, m)
    dx = np.zeros((n, m)) if dx is None else np.asarray(dx, dtype=float).reshape(n, m)
    dw = np.zeros(n) if dw is None else np.asarray(dw, dtype=float).reshape(n)
    dz = np.zeros((n, m)) if dz is None else np.asarray(dz, dtype=float).reshape(n, m)

    logged, scale = _stationarity_scale(sol, inst)
    lam = sol.dual_budget
    c = np.zeros((n, m))
    for i in range(n):
        if logged[i]:
            coef = sol.dual_lower[i] - sol.dual_upper[i] - lam - sys.z[i]
            c[i] = -(coef * (sol.allocation[i] @ dv[i]) + inst.weights[i] * dv[i]
                     + inst.values[i] * dw[i])
        elif inst.active[i]:
            u = np.sum(inst.values[i] * sol.allocation[i])
            c[i] = -inst.values[i] * dw[i] / u
        c[i] += scale[i] * dz[i]
    h = np.zeros(sys.matrix.shape[0])
    h[:nm] = c.ravel()
    h[2 * nm:3 * nm] = sol.dual_upper.ravel() * dx.ravel()

    U, s, Vt = sys.svd
    keep = s > settings.singular_threshold * s[0]
    d = Vt[keep].T @ ((U[:, keep].T @ h) / s[keep])
    return d[:nm].reshape(n, m)


# ── Gradients of the downstream scalar ──────────────────────────────────

def _agent_slice(adj: AdjointSolution, inst: ProblemInstance, agent: int) -> np.ndarray:
    _check_agent(inst, agent)
    m = inst.n_resources
    return adj.g_a[agent * m:(agent + 1) * m]


def grad_values(adj: AdjointSolution, sol: PFSolution, inst: ProblemInstance,
                z: Optional[np.ndarray], agent: int) -> np.ndarray:
    g = _agent_slice(adj, inst, agent)
    if not (inst.active[agent] and inst.weights[agent] > 0):
        return np.zeros(inst.n_resources)
    zi = np.zeros(inst.n_resources) if z is None else np.asarray(z, dtype=float).reshape(
        inst.values.shape)[agent]
    coef = sol.dual_lower[agent] - sol.dual_upper[agent] - sol.dual_budget - zi
    return -(inst.weights[agent] * g + sol.allocation[agent] * (coef @ g))


def grad_demands(adj: AdjointSolution, sol: PFSolution, inst: ProblemInstance) -> np.ndarray:
    return (sol.dual_upper.ravel() * adj.g_nu).reshape(inst.values.shape)


def grad_weights(adj: AdjointSolution, sol: PFSolution, inst: ProblemInstance,
                 agent: int) -> float:
    g = _agent_slice(adj, inst, agent)
    if not inst.active[agent]:
        return 0.0
    if inst.weights[agent] > 0:
        return float(-inst.values[agent] @ g)
    u = float(inst.values[agent] @ sol.allocation[agent])
    return float(-inst.values[agent] @ g / u)


def grad_regularizer(adj: AdjointSolution, sys: KKTSystem) -> np.ndarray:
    if not sys.regularized:
        raise VariantMismatchError("system was built without a regularizer")
    n, m = sys.instance.values.shape
    return sys.scale[:, None] * adj.g_a.reshape(n, m)
