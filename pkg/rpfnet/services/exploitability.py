"""Best-response misreport search and exploitability."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import implicit_diff as idiff
from .mechanisms import GradientUnavailableError, Mechanism
from .problem import ProblemInstance, _check_agent
from .solver import SolverError
from ..models import MisreportOut, MisreportSearchConfig

log = logging.getLogger(__name__)

__all__ = [
    "DimensionGuardError", "GradientUnavailableError", "Misreport", "best_misreport",
    "brute_force_misreport", "exploitability_agent", "exploitability_mean",
    "exploitability_profile",
]

_SEARCH_FAILURES = (SolverError, idiff.UnconvergedSolutionError, idiff.FactorizationError)
_MAX_GRID_DIMS = 6


class DimensionGuardError(ValueError):
    pass


@dataclass
class Misreport:
    agent: int
    values: np.ndarray
    demands: np.ndarray
    achieved_utility: float
    truthful_utility: float

    @property
    def gain(self) -> float:
        return max(0.0, self.achieved_utility - self.truthful_utility)

    def to_out(self) -> MisreportOut:
        return MisreportOut(agent=self.agent, values=self.values.tolist(),
                            demands=self.demands.tolist(),
                            achieved_utility=self.achieved_utility,
                            truthful_utility=self.truthful_utility)


def _project(v: np.ndarray, x: np.ndarray, box) -> tuple[np.ndarray, np.ndarray]:
    vl, vh, xl, xh = box
    return np.clip(v, vl, vh), np.clip(x, xl, xh)


def _evaluate(mech: Mechanism, inst: ProblemInstance, agent: int,
              v: np.ndarray, x: np.ndarray) -> float:
    reported = inst.with_report(agent, values=v, demands=x)
    return float(mech.expected_utility(reported, inst)[agent])


def _ascend(mech: Mechanism, inst: ProblemInstance, agent: int, v: np.ndarray, x: np.ndarray,
            cfg: MisreportSearchConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Projected gradient ascent from one start; returns the best point visited."""
    best = (-np.inf, v, x)
    for t in range(cfg.steps + 1):
        reported = inst.with_report(agent, values=v, demands=x)
        try:
            if t == cfg.steps:
                u = float(mech.expected_utility(reported, inst)[agent])
            else:
                u, dv, dx = mech.utility_with_grad(reported, inst, agent)
        except _SEARCH_FAILURES as e:
            log.debug("Misreport ascent stopped  agent=%d  step=%d  err=%s", agent, t, e)
            break
        if u > best[0]:
            best = (u, v.copy(), x.copy())
        if t == cfg.steps:
            break
        rate = cfg.step_size
        if cfg.cosine_decay:
            rate *= 0.5 * (1.0 + np.cos(np.pi * t / cfg.steps))
        v, x = _project(v + rate * dv, x + rate * dx, cfg.projection_box)
    return best


def best_misreport(mech: Mechanism, inst: ProblemInstance, agent: int,
                   cfg: Optional[MisreportSearchConfig] = None,
                   warm_starts: Iterable[tuple[np.ndarray, np.ndarray]] = ()) -> Misreport:
    """Best report found by ascent from the truthful report, warm starts and random restarts.

    With ``cfg.steps == 0`` only the truthful report is evaluated.
    """
    cfg = cfg or MisreportSearchConfig()
    _check_agent(inst, agent)
    v0 = inst.values[agent].copy()
    x0 = inst.demands[agent].copy()
    truthful = _evaluate(mech, inst, agent, v0, x0)
    best = Misreport(agent, v0, x0, truthful, truthful)
    if cfg.steps == 0:
        return best

    m = inst.n_resources
    vl, vh, xl, xh = cfg.projection_box
    rng = np.random.default_rng(cfg.seed + agent)
    starts = [(v0, x0)]
    starts += [_project(np.asarray(v, dtype=float), np.asarray(x, dtype=float), cfg.projection_box)
               for v, x in warm_starts]
    starts += [(rng.uniform(vl, vh, m), rng.uniform(xl, xh, m)) for _ in range(cfg.restarts)]

    for v, x in starts:
        u, bv, bx = _ascend(mech, inst, agent, v.copy(), x.copy(), cfg)
        if u > best.achieved_utility:
            best = Misreport(agent, bv, bx, u, truthful)
    return best


def exploitability_agent(mech: Mechanism, inst: ProblemInstance, agent: int,
                         cfg: Optional[MisreportSearchConfig] = None) -> float:
    found = best_misreport(mech, inst, agent, cfg)
    _check_bound(found, inst)
    return found.gain


def _check_bound(found: Misreport, inst: ProblemInstance) -> None:
    cap = float(inst.values[found.agent] @ inst.demands[found.agent])
    if found.gain > cap + 1e-9:
        log.warning("Exploitability above full-demand utility  agent=%d  gain=%.3e  cap=%.3e",
                    found.agent, found.gain, cap)


def exploitability_profile(mech: Mechanism, inst: ProblemInstance,
                           cfg: Optional[MisreportSearchConfig] = None) -> list[Misreport]:
    out = []
    for i in range(inst.n_agents):
        found = best_misreport(mech, inst, i, cfg)
        _check_bound(found, inst)
        out.append(found)
    return out


def exploitability_mean(mech: Mechanism, inst: ProblemInstance,
                        cfg: Optional[MisreportSearchConfig] = None) -> float:
    return float(np.mean([m.gain for m in exploitability_profile(mech, inst, cfg)]))


def _grid_axis(lo: float, hi: float, steps: int) -> np.ndarray:
    # Doubling ``steps`` keeps every earlier point on the grid.
    if steps == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, steps + 1)


def _demand_axis(lo: float, hi: float, truth: float, steps: int, under_report: bool) -> np.ndarray:
    if not under_report:
        return _grid_axis(lo, hi, steps)
    if truth <= 0:
        return np.array([0.0])
    return _grid_axis(min(lo, truth), min(hi, truth), steps)


def brute_force_misreport(mech: Mechanism, inst: ProblemInstance, agent: int,
                          grid_steps: int,
                          box: Optional[tuple[float, float, float, float]] = None,
                          report: str = "both", under_report: bool = False) -> Misreport:
    """Grid search over the agent's report.

    ``report`` picks the searched part ("both", "values" or "demands"); the
    other part stays truthful.  ``under_report`` caps each demand axis at
    the true demand.
    """
    _check_agent(inst, agent)
    if report not in ("both", "values", "demands"):
        raise ValueError(f"unknown report part {report!r}")
    m = inst.n_resources
    dims = m * (2 if report == "both" else 1)
    if dims > _MAX_GRID_DIMS:
        raise DimensionGuardError(f"grid search over {dims} dimensions exceeds {_MAX_GRID_DIMS}")
    if grid_steps < 1:
        raise ValueError("grid_steps must be at least 1")
    vl, vh, xl, xh = box or inst.bounds.as_tuple()
    v_true, x_true = inst.values[agent], inst.demands[agent]
    if report == "demands":
        v_axes = [np.array([v]) for v in v_true]
    else:
        v_axes = [_grid_axis(vl, vh, grid_steps)] * m
    if report == "values":
        x_axes = [np.array([x]) for x in x_true]
    else:
        x_axes = [_demand_axis(xl, xh, x, grid_steps, under_report) for x in x_true]

    truthful = _evaluate(mech, inst, agent, v_true, x_true)
    best: Optional[Misreport] = None
    for point in itertools.product(*(v_axes + x_axes)):
        v = np.array(point[:m])
        x = np.array(point[m:])
        try:
            u = _evaluate(mech, inst, agent, v, x)
        except _SEARCH_FAILURES as e:
            log.debug("Grid point skipped  agent=%d  err=%s", agent, e)
            continue
        if best is None or u > best.achieved_utility:
            best = Misreport(agent, v, x, u, truthful)
    if best is None:
        raise SolverError("every grid point failed to solve")
    return best
