"""Allocation mechanisms.

Every mechanism maps reports to a feasible allocation.  Deterministic ones
also expose ``forward`` / ``backward`` so a downstream scalar (an agent's
utility, the training loss) can be differentiated with respect to the
reports and, for the learned ones, the network weights.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, ClassVar, Optional

import numpy as np
from scipy.special import softmax

from . import implicit_diff as idiff
from .network import ForwardCache, MLPGrads, MLPParams, backward, forward, init_params
from .problem import DimensionError, ProblemInstance, utility, utility_grad
from .solver import MaxIterationsExceeded, PFSolution, solve_regularized_pf
from ..config import settings
from ..models import MechanismKind, MechanismModel, NetworkConfig, OutputHead, SolverConfig

log = logging.getLogger(__name__)


class MissingRNGError(ValueError):
    pass


class PAWeightError(ValueError):
    """Partial allocation needs a positive weight for every active agent."""


class GradientUnavailableError(TypeError):
    pass


def _solve(inst: ProblemInstance, z: Optional[np.ndarray], cfg: Optional[SolverConfig]) -> PFSolution:
    try:
        return solve_regularized_pf(inst, z, cfg)
    except MaxIterationsExceeded as e:
        if e.best.kkt_residual <= settings.kkt_build_threshold:
            log.warning("Using best iterate  residual=%.2e", e.best.kkt_residual)
            return e.best
        raise


@dataclass
class ReportGrads:
    """Gradient of a downstream scalar w.r.t. reports (and weights, if learned)."""
    values: np.ndarray
    demands: np.ndarray
    params: Optional[MLPGrads] = None


@dataclass
class MechanismPass:
    allocation: np.ndarray
    instance: ProblemInstance
    solution: Optional[PFSolution] = None
    z: Optional[np.ndarray] = None
    cache: Optional[ForwardCache] = None
    extra: dict[str, Any] = field(default_factory=dict)


def _pf_report_grads(sol: PFSolution, inst: ProblemInstance, upstream: np.ndarray,
                     z: Optional[np.ndarray] = None) -> tuple[ReportGrads, idiff.AdjointSolution,
                                                                idiff.KKTSystem]:
    sys = idiff.build_kkt_matrix(sol, inst, z)
    adj = idiff.solve_adjoint(sys, upstream)
    if adj.min_norm:
        log.debug("Min-norm subgradient used for report gradient")
    dv = np.stack([idiff.grad_values(adj, sol, inst, z, i) for i in range(inst.n_agents)])
    dx = idiff.grad_demands(adj, sol, inst)
    return ReportGrads(dv, dx), adj, sys


# ── Partial allocation ──────────────────────────────────────────────────

@dataclass
class PAResult:
    allocation: np.ndarray
    ratios: np.ndarray
    leave_one_out_objectives: np.ndarray
    solution: PFSolution = field(repr=False, default=None)
    leave_one_out: list[Optional[PFSolution]] = field(repr=False, default_factory=list)


def pa_allocate(inst: ProblemInstance, cfg: Optional[SolverConfig] = None) -> PAResult:
    n = inst.n_agents
    counted = inst.active & (inst.weights > 0)
    bad = inst.active & (inst.weights <= 0)
    if np.any(bad):
        raise PAWeightError(f"agents {np.flatnonzero(bad).tolist()} have zero weight")

    sol = _solve(inst, None, cfg)
    u_star = utility(sol.allocation, inst)
    ratios = np.ones(n)
    loo_obj = np.zeros(n)
    loo: list[Optional[PFSolution]] = [None] * n
    for i in range(n):
        if not inst.active[i]:
            loo_obj[i] = sol.objective
            continue
        loo_inst = inst.without_agent(i)
        loo[i] = _solve(loo_inst, None, cfg)
        loo_obj[i] = loo[i].objective
        u_loo = utility(loo[i].allocation, loo_inst)
        others = counted.copy()
        others[i] = False
        if np.any(u_loo[others] <= 0):
            log.warning("PA: zero leave-one-out utility  agent=%d  ratio set to 0", i)
            ratios[i] = 0.0
            continue
        log_r = np.sum(inst.weights[others] * (np.log(u_star[others]) - np.log(u_loo[others])))
        ratios[i] = min(float(np.exp(log_r / inst.weights[i])), 1.0)
    alloc = ratios[:, None] * sol.allocation
    return PAResult(alloc, ratios, loo_obj, sol, loo)


def pa_backward(res: PAResult, inst: ProblemInstance, upstream: np.ndarray) -> ReportGrads:
    """Report gradient of <upstream, r * a*>.

    Differentiates the externality ratios through both the full PF solve and
    each leave-one-out solve; agent k's own report never enters its
    leave-k-out problem.
    """
    G = np.asarray(upstream, dtype=float).reshape(inst.values.shape)
    sol, r = res.solution, res.ratios
    a = sol.allocation
    v, w = inst.values, inst.weights
    counted = inst.active & (w > 0)
    u_star = np.sum(v * a, axis=1)

    up_full = r[:, None] * G
    dv = np.zeros_like(v)
    dx = np.zeros_like(v)
    for k in range(inst.n_agents):
        share = r[k] * float(G[k] @ a[k])
        if share == 0.0 or res.leave_one_out[k] is None:
            continue
        s = share / w[k]
        loo_sol = res.leave_one_out[k]
        loo_inst = inst.without_agent(k)
        a_loo = loo_sol.allocation
        u_loo = np.sum(v * a_loo, axis=1)
        up_loo = np.zeros_like(v)
        for j in np.flatnonzero(counted):
            if j == k:
                continue
            up_full[j] += s * w[j] * v[j] / u_star[j]
            dv[j] += s * w[j] * a[j] / u_star[j]
            up_loo[j] -= s * w[j] * v[j] / u_loo[j]
            dv[j] -= s * w[j] * a_loo[j] / u_loo[j]
        g_loo, _, _ = _pf_report_grads(loo_sol, loo_inst, up_loo)
        g_loo.demands[k] = 0.0
        dv += g_loo.values
        dx += g_loo.demands
    g_full, _, _ = _pf_report_grads(sol, inst, up_full)
    return ReportGrads(dv + g_full.values, dx + g_full.demands)


# ── Learned mechanisms ──────────────────────────────────────────────────

def _check_input(params: MLPParams, inst: ProblemInstance, rows: int) -> None:
    n, m = inst.values.shape
    if params.input_dim != 2 * n * m + m or params.output_dim != rows * m:
        raise DimensionError(
            f"network {params.input_dim}->{params.output_dim} does not fit a {n}x{m} instance")


def _split_input_grad(d_in: np.ndarray, inst: ProblemInstance) -> tuple[np.ndarray, np.ndarray]:
    nm = inst.values.size
    return d_in[:nm].reshape(inst.values.shape), d_in[nm:2 * nm].reshape(inst.values.shape)


@dataclass
class RPFResult:
    allocation: np.ndarray
    solution: PFSolution
    z: np.ndarray
    cache: ForwardCache = field(repr=False)


def rpf_allocate(params: MLPParams, inst: ProblemInstance,
                 cfg: Optional[SolverConfig] = None) -> RPFResult:
    _check_input(params, inst, inst.n_agents)
    out, cache = forward(params, inst.features())
    z = out.reshape(inst.values.shape)
    sol = _solve(inst, z, cfg)
    return RPFResult(sol.allocation, sol, z, cache)


def rpf_backward(params: MLPParams, inst: ProblemInstance, res: RPFResult,
                 upstream: np.ndarray) -> ReportGrads:
    """Chain d loss / d a through the regularized PF layer and the network."""
    g, adj, sys = _pf_report_grads(res.solution, inst, upstream, res.z)
    dz = idiff.grad_regularizer(adj, sys)
    g.params, d_in = backward(params, res.cache, dz.ravel())
    dv_net, dx_net = _split_input_grad(d_in, inst)
    g.values += dv_net
    g.demands += dx_net
    return g


@dataclass
class SoftmaxResult:
    allocation: np.ndarray
    shares: np.ndarray          # rows x M, columns sum to 1
    cache: ForwardCache = field(repr=False)


def _softmax_allocate(params: MLPParams, inst: ProblemInstance, synthetic: bool) -> SoftmaxResult:
    n, m = inst.values.shape
    rows = n + 1 if synthetic else n
    _check_input(params, inst, rows)
    logits, cache = forward(params, inst.features())
    shares = softmax(logits.reshape(rows, m), axis=0)
    alloc = np.minimum(shares[:n] * inst.budgets[None, :], inst.demands)
    return SoftmaxResult(alloc, shares, cache)


def exs_allocate(params: MLPParams, inst: ProblemInstance) -> np.ndarray:
    return _softmax_allocate(params, inst, synthetic=True).allocation


def softmax_net_allocate(params: MLPParams, inst: ProblemInstance) -> np.ndarray:
    return _softmax_allocate(params, inst, synthetic=False).allocation


def _softmax_backward(params: MLPParams, inst: ProblemInstance, res: SoftmaxResult,
                      upstream: np.ndarray) -> ReportGrads:
    n = inst.n_agents
    G = np.asarray(upstream, dtype=float).reshape(inst.values.shape)
    raw = res.shares[:n] * inst.budgets[None, :]
    below = raw < inst.demands
    d_shares = np.zeros_like(res.shares)
    d_shares[:n] = np.where(below, G, 0.0) * inst.budgets[None, :]
    s = res.shares
    d_logits = s * (d_shares - np.sum(s * d_shares, axis=0, keepdims=True))
    grads, d_in = backward(params, res.cache, d_logits.ravel())
    dv, dx = _split_input_grad(d_in, inst)
    dx = dx + np.where(below, 0.0, G)
    return ReportGrads(dv, dx, grads)


# ── Mechanism objects ───────────────────────────────────────────────────

class Mechanism:
    kind: ClassVar[MechanismKind]
    stochastic: ClassVar[bool] = False
    learned: ClassVar[bool] = False

    def __init__(self, solver: Optional[SolverConfig] = None):
        self.solver = solver

    @property
    def name(self) -> str:
        return self.kind.value

    def forward(self, inst: ProblemInstance) -> MechanismPass:
        raise GradientUnavailableError(f"{self.name} has no deterministic forward pass")

    def backward(self, pss: MechanismPass, upstream: np.ndarray) -> ReportGrads:
        raise GradientUnavailableError(f"{self.name} does not provide gradients")

    def allocate(self, inst: ProblemInstance, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return self.forward(inst).allocation

    def utility_with_grad(self, reported: ProblemInstance, truth: ProblemInstance,
                          agent: int) -> tuple[float, np.ndarray, np.ndarray]:
        """True utility of ``agent`` under ``reported`` and its gradient w.r.t. that agent's report."""
        pss = self.forward(reported)
        u = float(utility(pss.allocation, truth)[agent])
        up = utility_grad(pss.allocation, truth, agent)
        if not np.any(up):
            zeros = np.zeros(truth.n_resources)
            return u, zeros, zeros.copy()
        g = self.backward(pss, up)
        return u, g.values[agent], g.demands[agent]

    def expected_utility(self, reported: ProblemInstance, truth: ProblemInstance) -> np.ndarray:
        return utility(self.allocate(reported, np.random.default_rng(0)), truth)

    def to_model(self) -> MechanismModel:
        return MechanismModel(kind=self.kind)


class PFMechanism(Mechanism):
    kind = MechanismKind.PF

    def forward(self, inst: ProblemInstance) -> MechanismPass:
        sol = _solve(inst, None, self.solver)
        return MechanismPass(sol.allocation, inst, solution=sol)

    def backward(self, pss: MechanismPass, upstream: np.ndarray) -> ReportGrads:
        return _pf_report_grads(pss.solution, pss.instance, upstream)[0]


class PAMechanism(Mechanism):
    kind = MechanismKind.PA

    def forward(self, inst: ProblemInstance) -> MechanismPass:
        res = pa_allocate(inst, self.solver)
        return MechanismPass(res.allocation, inst, solution=res.solution, extra={"pa": res})

    def backward(self, pss: MechanismPass, upstream: np.ndarray) -> ReportGrads:
        return pa_backward(pss.extra["pa"], pss.instance, upstream)


def mixture_allocate(inst: ProblemInstance, rho: float, rng: np.random.Generator,
                     cfg: Optional[SolverConfig] = None) -> np.ndarray:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if rng.random() < rho:
        return _solve(inst, None, cfg).allocation
    return pa_allocate(inst, cfg).allocation


class MixtureMechanism(Mechanism):
    """Draws PF with probability rho, otherwise PA.

    Misreport search uses the expected utility, which is linear in the two
    component utilities.
    """
    kind = MechanismKind.MIXTURE
    stochastic = True

    def __init__(self, rho: float = 0.5, solver: Optional[SolverConfig] = None):
        super().__init__(solver)
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {rho}")
        self.rho = rho
        self._pf = PFMechanism(solver)
        self._pa = PAMechanism(solver)

    @property
    def name(self) -> str:
        return f"mixture({self.rho:g})"

    def allocate(self, inst: ProblemInstance, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if rng is None:
            raise MissingRNGError("mixture mechanism needs an explicit rng")
        return mixture_allocate(inst, self.rho, rng, self.solver)

    def _parts(self):
        return [(p, m) for p, m in ((self.rho, self._pf), (1.0 - self.rho, self._pa)) if p > 0]

    def utility_with_grad(self, reported, truth, agent):
        u, dv, dx = 0.0, np.zeros(truth.n_resources), np.zeros(truth.n_resources)
        for p, mech in self._parts():
            ui, dvi, dxi = mech.utility_with_grad(reported, truth, agent)
            u += p * ui
            dv += p * dvi
            dx += p * dxi
        return u, dv, dx

    def expected_utility(self, reported: ProblemInstance, truth: ProblemInstance) -> np.ndarray:
        return sum(p * utility(m.allocate(reported), truth) for p, m in self._parts())

    def to_model(self) -> MechanismModel:
        return MechanismModel(kind=self.kind, rho=self.rho)


class LearnedMechanism(Mechanism):
    learned = True
    rows_extra: ClassVar[int] = 0
    default_head: ClassVar[OutputHead] = OutputHead.IDENTITY

    def __init__(self, params: MLPParams, n_agents: int, n_resources: int,
                 solver: Optional[SolverConfig] = None):
        super().__init__(solver)
        self.params = params
        self.n_agents = n_agents
        self.n_resources = n_resources
        expected = [2 * n_agents * n_resources + n_resources,
                    (n_agents + self.rows_extra) * n_resources]
        got = [params.input_dim, params.output_dim]
        if got != expected:
            raise DimensionError(f"network in/out {got} != {expected} for {self.name}")

    @classmethod
    def create(cls, n_agents: int, n_resources: int, cfg: Optional[NetworkConfig] = None,
               solver: Optional[SolverConfig] = None) -> "LearnedMechanism":
        cfg = cfg or NetworkConfig(head=cls.default_head)
        sizes = ([2 * n_agents * n_resources + n_resources]
                 + [cfg.hidden_width] * cfg.hidden_layers
                 + [(n_agents + cls.rows_extra) * n_resources])
        return cls(init_params(sizes, cfg.head, cfg.seed), n_agents, n_resources, solver)

    def with_params(self, params: MLPParams) -> "LearnedMechanism":
        return type(self)(params, self.n_agents, self.n_resources, self.solver)

    def to_model(self) -> MechanismModel:
        return MechanismModel(kind=self.kind, n_agents=self.n_agents,
                              n_resources=self.n_resources, network=self.params.to_model())


class RPFNetMechanism(LearnedMechanism):
    kind = MechanismKind.RPF_NET
    default_head = OutputHead.SOFTPLUS

    def forward(self, inst: ProblemInstance) -> MechanismPass:
        res = rpf_allocate(self.params, inst, self.solver)
        return MechanismPass(res.allocation, inst, solution=res.solution, z=res.z,
                             cache=res.cache, extra={"rpf": res})

    def backward(self, pss: MechanismPass, upstream: np.ndarray) -> ReportGrads:
        return rpf_backward(self.params, pss.instance, pss.extra["rpf"], upstream)


class ExSNetMechanism(LearnedMechanism):
    kind = MechanismKind.EXS_NET
    rows_extra = 1

    def forward(self, inst: ProblemInstance) -> MechanismPass:
        res = _softmax_allocate(self.params, inst, synthetic=True)
        return MechanismPass(res.allocation, inst, cache=res.cache, extra={"softmax": res})

    def backward(self, pss: MechanismPass, upstream: np.ndarray) -> ReportGrads:
        return _softmax_backward(self.params, pss.instance, pss.extra["softmax"], upstream)


class SoftmaxNetMechanism(ExSNetMechanism):
    kind = MechanismKind.SOFTMAX_NET
    rows_extra = 0

    def forward(self, inst: ProblemInstance) -> MechanismPass:
        res = _softmax_allocate(self.params, inst, synthetic=False)
        return MechanismPass(res.allocation, inst, cache=res.cache, extra={"softmax": res})


_LEARNED: dict[MechanismKind, type[LearnedMechanism]] = {
    MechanismKind.RPF_NET: RPFNetMechanism,
    MechanismKind.EXS_NET: ExSNetMechanism,
    MechanismKind.SOFTMAX_NET: SoftmaxNetMechanism,
}


def allocate(mech: Mechanism, inst: ProblemInstance,
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if mech.stochastic and rng is None:
        raise MissingRNGError(f"{mech.name} is stochastic and needs an rng")
    return mech.allocate(inst, rng)


def build_mechanism(kind: MechanismKind, n_agents: Optional[int] = None,
                    n_resources: Optional[int] = None, rho: float = 0.5,
                    network: Optional[NetworkConfig] = None,
                    solver: Optional[SolverConfig] = None) -> Mechanism:
    """Fresh mechanism of the given kind; learned kinds get initialised weights."""
    if kind == MechanismKind.PF:
        return PFMechanism(solver)
    if kind == MechanismKind.PA:
        return PAMechanism(solver)
    if kind == MechanismKind.MIXTURE:
        return MixtureMechanism(rho, solver)
    if n_agents is None or n_resources is None:
        raise ValueError(f"{kind.value} needs n_agents and n_resources")
    cls = _LEARNED[kind]
    if network is not None and kind != MechanismKind.RPF_NET:
        network = network.model_copy(update={"head": OutputHead.IDENTITY})
    return cls.create(n_agents, n_resources, network, solver)


def mechanism_from_model(model: MechanismModel, solver: Optional[SolverConfig] = None) -> Mechanism:
    if model.kind in _LEARNED:
        if model.network is None or model.n_agents is None or model.n_resources is None:
            raise ValueError(f"{model.kind.value} model needs network, n_agents and n_resources")
        params = MLPParams.from_model(model.network)
        return _LEARNED[model.kind](params, model.n_agents, model.n_resources, solver)
    return build_mechanism(model.kind, rho=0.5 if model.rho is None else model.rho, solver=solver)
