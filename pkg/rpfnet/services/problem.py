"""Allocation problem instances and the welfare metrics computed on them."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..config import settings

log = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Array shapes do not agree with the instance dimensions."""


class NonPositiveUtilityError(ValueError):
    """An active agent with positive weight has zero utility."""


class ZeroBudgetError(ValueError):
    """Total budget is zero, so efficiency has no denominator."""


@dataclass(frozen=True)
class Bounds:
    value_low: float = settings.value_low
    value_high: float = settings.value_high
    demand_low: float = settings.demand_low
    demand_high: float = settings.demand_high

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.value_low, self.value_high, self.demand_low, self.demand_high)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """One allocation problem.

    ``values`` and ``demands`` are N x M arrays; ``ravel()`` gives the
    agent-major stacking (index i*M + m) used by every solver vector.
    """
    values: np.ndarray
    demands: np.ndarray
    budgets: np.ndarray
    weights: np.ndarray
    bounds: Bounds = field(default_factory=Bounds)

    def __post_init__(self):
        v = _frozen(self.values)
        x = _frozen(self.demands)
        b = _frozen(self.budgets).reshape(-1)
        w = _frozen(self.weights).reshape(-1)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionError(f"values must be a non-empty N x M matrix, got shape {v.shape}")
        n, m = v.shape
        if x.shape != (n, m):
            raise DimensionError(f"demands shape {x.shape} != values shape {(n, m)}")
        if b.shape != (m,):
            raise DimensionError(f"budgets must have length {m}, got {b.shape[0]}")
        if w.shape != (n,):
            raise DimensionError(f"weights must have length {n}, got {w.shape[0]}")
        if np.any(v <= 0):
            raise ValueError("values must be strictly positive")
        if np.any(x < 0) or np.any(b < 0) or np.any(w < 0):
            raise ValueError("demands, budgets and weights must be nonnegative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "demands", x)
        object.__setattr__(self, "budgets", b)
        object.__setattr__(self, "weights", w)

    @property
    def n_agents(self) -> int:
        return self.values.shape[0]

    @property
    def n_resources(self) -> int:
        return self.values.shape[1]

    @property
    def active(self) -> np.ndarray:
        """Agents that can receive utility at all (some positive demand)."""
        return np.any(self.demands > 0, axis=1)

    def within_bounds(self) -> bool:
        bd = self.bounds
        x = self.demands
        ok_v = np.all((self.values >= bd.value_low - 1e-12) & (self.values <= bd.value_high + 1e-12))
        ok_x = np.all((x == 0) | ((x >= bd.demand_low - 1e-12) & (x <= bd.demand_high + 1e-12)))
        return bool(ok_v and ok_x)

    def with_report(self, agent: int, values=None, demands=None) -> "ProblemInstance":
        """Copy with agent ``agent``'s row of values and/or demands replaced."""
        _check_agent(self, agent)
        v = np.array(self.values)
        x = np.array(self.demands)
        if values is not None:
            v[agent] = values
        if demands is not None:
            x[agent] = demands
        return replace(self, values=v, demands=x)

    def without_agent(self, agent: int) -> "ProblemInstance":
        """Leave-one-out copy: agent's demand row zeroed."""
        return self.with_report(agent, demands=np.zeros(self.n_resources))

    def features(self) -> np.ndarray:
        """Concatenated (v, x, b) network input of length 2NM + M."""
        return np.concatenate([self.values.ravel(), self.demands.ravel(), self.budgets])

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "n_resources": self.n_resources,
            "values": self.values.tolist(),
            "demands": self.demands.tolist(),
            "budgets": self.budgets.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, bounds: Optional[Bounds] = None) -> "ProblemInstance":
        inst = cls(
            values=d["values"],
            demands=d["demands"],
            budgets=d["budgets"],
            weights=d.get("weights") or [1.0] * len(d["values"]),
            bounds=bounds or Bounds(),
        )
        n, m = d.get("n_agents"), d.get("n_resources")
        if (n is not None and n != inst.n_agents) or (m is not None and m != inst.n_resources):
            raise DimensionError(
                f"declared {n}x{m} but arrays are {inst.n_agents}x{inst.n_resources}")
        return inst


def _check_agent(inst: ProblemInstance, agent: int) -> None:
    if not 0 <= agent < inst.n_agents:
        raise IndexError(f"agent index {agent} out of range for {inst.n_agents} agents")


def _check_alloc(alloc: np.ndarray, inst: ProblemInstance) -> np.ndarray:
    a = np.asarray(alloc, dtype=float)
    if a.shape != inst.values.shape:
        if a.size == inst.values.size and a.ndim == 1:
            return a.reshape(inst.values.shape)
        raise DimensionError(f"allocation shape {a.shape} != {inst.values.shape}")
    return a


# ── Metrics ─────────────────────────────────────────────────────────────

def utility(alloc: np.ndarray, inst: ProblemInstance) -> np.ndarray:
    """u_i = sum_m v_im * min(a_im, x_im)."""
    a = _check_alloc(alloc, inst)
    return np.sum(inst.values * np.minimum(a, inst.demands), axis=1)


def utility_grad(alloc: np.ndarray, inst: ProblemInstance, agent: int) -> np.ndarray:
    """d u_agent / d a as an N x M array (subgradient 0 at saturation)."""
    _check_agent(inst, agent)
    a = _check_alloc(alloc, inst)
    g = np.zeros_like(a)
    g[agent] = np.where(a[agent] < inst.demands[agent], inst.values[agent], 0.0)
    return g


def _counted_utility(alloc: np.ndarray, inst: ProblemInstance) -> tuple[np.ndarray, np.ndarray]:
    u = utility(alloc, inst)
    counted = inst.weights > 0
    bad = counted & (u <= 0)
    if np.any(bad):
        raise NonPositiveUtilityError(
            f"agents {np.flatnonzero(bad).tolist()} have nonpositive utility")
    return u, counted


def log_nsw(alloc: np.ndarray, inst: ProblemInstance) -> float:
    """sum_i w_i log u_i over every agent with positive weight."""
    u, counted = _counted_utility(alloc, inst)
    return float(np.sum(inst.weights[counted] * np.log(u[counted])))


def log_nsw_grad(alloc: np.ndarray, inst: ProblemInstance) -> np.ndarray:
    a = _check_alloc(alloc, inst)
    u, counted = _counted_utility(a, inst)
    scale = np.zeros(inst.n_agents)
    scale[counted] = inst.weights[counted] / u[counted]
    return scale[:, None] * np.where(a < inst.demands, inst.values, 0.0)


def nsw(alloc: np.ndarray, inst: ProblemInstance) -> float:
    try:
        return float(np.exp(log_nsw(alloc, inst)))
    except NonPositiveUtilityError:
        return 0.0


def efficiency(alloc: np.ndarray, inst: ProblemInstance) -> float:
    a = _check_alloc(alloc, inst)
    total = float(np.sum(inst.budgets))
    if total <= 0:
        raise ZeroBudgetError("efficiency is undefined for zero total budget")
    return float(np.sum(a)) / total


def is_feasible(alloc: np.ndarray, inst: ProblemInstance, tol: float = 1e-6) -> bool:
    a = _check_alloc(alloc, inst)
    return bool(
        np.all(a >= -tol)
        and np.all(a <= inst.demands + tol)
        and np.all(a.sum(axis=0) <= inst.budgets + tol)
    )
