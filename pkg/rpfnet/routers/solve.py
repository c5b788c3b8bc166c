"""API routes for allocation, PF solves and exploitability queries."""
from __future__ import annotations

import logging

import numpy as np
from fastapi import APIRouter, HTTPException

from ..models import (
    AllocateRequest, AllocationOut, ExploitabilityOut, ExploitabilityRequest, MechanismKind,
    ProblemInstanceModel, SolutionOut, SolveRequest,
)
from ..services.exploitability import exploitability_profile
from ..services.mechanisms import (
    GradientUnavailableError, Mechanism, PAMechanism, build_mechanism, mechanism_from_model,
)
from ..services.problem import ProblemInstance, efficiency, is_feasible, nsw, utility
from ..services.solver import SolverError, solve_regularized_pf

log = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["allocation"])


def _instance(model: ProblemInstanceModel) -> ProblemInstance:
    try:
        return ProblemInstance.from_dict(model.model_dump())
    except ValueError as e:
        raise HTTPException(400, str(e))


def _mechanism(kind: MechanismKind, rho: float, model) -> Mechanism:
    try:
        if model is not None:
            return mechanism_from_model(model)
        return build_mechanism(kind, rho=rho)
    except ValueError as e:
        raise HTTPException(400, str(e))


@router.get("/health")
async def health():
    return {"ok": True}


@router.post("/solve", response_model=SolutionOut)
async def solve(body: SolveRequest):
    inst = _instance(body.instance)
    z = None if body.regularizer is None else np.array(body.regularizer, dtype=float)
    try:
        sol = solve_regularized_pf(inst, z, body.solver)
    except ValueError as e:
        raise HTTPException(400, str(e))
    except SolverError as e:
        raise HTTPException(422, str(e))
    return SolutionOut(**sol.to_dict())


@router.post("/allocate", response_model=AllocationOut)
async def allocate(body: AllocateRequest):
    inst = _instance(body.instance)
    mech = _mechanism(body.mechanism, body.rho, body.model)
    ratios = None
    try:
        if isinstance(mech, PAMechanism):
            pss = mech.forward(inst)
            alloc = pss.allocation
            ratios = pss.extra["pa"].ratios.tolist()
        else:
            alloc = mech.allocate(inst, np.random.default_rng(body.seed))
    except ValueError as e:
        raise HTTPException(400, str(e))
    except (SolverError, RuntimeError) as e:
        raise HTTPException(422, str(e))
    return AllocationOut(
        mechanism=mech.name,
        allocation=alloc.tolist(),
        utilities=utility(alloc, inst).tolist(),
        nsw=nsw(alloc, inst),
        efficiency=efficiency(alloc, inst) if inst.budgets.sum() > 0 else 0.0,
        feasible=is_feasible(alloc, inst),
        ratios=ratios,
    )


@router.post("/exploitability", response_model=ExploitabilityOut)
async def exploitability(body: ExploitabilityRequest):
    inst = _instance(body.instance)
    mech = _mechanism(body.mechanism, body.rho, body.model)
    try:
        found = exploitability_profile(mech, inst, body.search)
    except GradientUnavailableError as e:
        raise HTTPException(400, str(e))
    except ValueError as e:
        raise HTTPException(400, str(e))
    except RuntimeError as e:
        raise HTTPException(422, str(e))
    gains = [m.gain for m in found]
    log.info("Exploitability  mechanism=%s  mean=%.3e", mech.name, float(np.mean(gains)))
    return ExploitabilityOut(
        mechanism=mech.name,
        per_agent=gains,
        mean=float(np.mean(gains)),
        misreports=[m.to_out() for m in found],
    )
