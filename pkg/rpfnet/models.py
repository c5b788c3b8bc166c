from __future__ import annotations

from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import settings


# ── Enums ───────────────────────────────────────────────────────────────

class MechanismKind(str, Enum):
    PF = "pf"
    PA = "pa"
    MIXTURE = "mixture"
    RPF_NET = "rpf_net"
    EXS_NET = "exs_net"
    SOFTMAX_NET = "softmax_net"


class Provenance(str, Enum):
    TRUTHFUL = "truthful"
    CAUCHY = "cauchy"
    ADVERSARIAL = "adversarial"


class OutputHead(str, Enum):
    IDENTITY = "identity"
    SOFTPLUS = "softplus"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


# ── Run configuration ───────────────────────────────────────────────────

class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tolerance: float = settings.solver_tolerance
    max_iterations: int = settings.solver_max_iterations
    barrier_decrease: float = settings.solver_barrier_decrease
    initial_barrier: float = settings.solver_initial_barrier

    @field_validator("tolerance", "initial_barrier")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("max_iterations")
    @classmethod
    def _positive_int(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("max_iterations must be positive")
        return v

    @field_validator("barrier_decrease")
    @classmethod
    def _unit_interval(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("barrier_decrease must lie in (0, 1)")
        return v


class MisreportSearchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = settings.search_steps  # 0 = evaluate the truthful start only
    step_size: float = settings.search_step_size
    restarts: int = settings.search_restarts
    projection_box: tuple[float, float, float, float] = (
        settings.value_low, settings.value_high, settings.demand_low, settings.demand_high,
    )
    seed: int = 0
    cosine_decay: bool = True

    @field_validator("steps")
    @classmethod
    def _steps(cls, v: int) -> int:
        if v < 0:
            raise ValueError("steps must be nonnegative")
        return v

    @field_validator("step_size")
    @classmethod
    def _step_size(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("step_size must be positive")
        return v

    @field_validator("restarts")
    @classmethod
    def _restarts(cls, v: int) -> int:
        if v < 1:
            raise ValueError("restarts must be at least 1")
        return v

    @field_validator("projection_box")
    @classmethod
    def _box(cls, v: tuple[float, float, float, float]) -> tuple[float, float, float, float]:
        vl, vh, xl, xh = v
        if not (0 < vl <= vh and 0 <= xl <= xh):
            raise ValueError("projection_box must be (v_low, v_high, x_low, x_high) with v_low > 0")
        return v


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_width: int = settings.hidden_width
    hidden_layers: int = settings.hidden_layers
    head: OutputHead = OutputHead.SOFTPLUS
    seed: int = 0

    @field_validator("hidden_width")
    @classmethod
    def _width(cls, v: int) -> int:
        if v < 1:
            raise ValueError("hidden_width must be at least 1")
        return v

    # 0 hidden layers is a single affine map
    @field_validator("hidden_layers")
    @classmethod
    def _layers(cls, v: int) -> int:
        if v < 0:
            raise ValueError("hidden_layers must be nonnegative")
        return v


def _training_search() -> MisreportSearchConfig:
    return MisreportSearchConfig(steps=25, restarts=1)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iterations: int = 2000
    batch_size: int = 16
    primal_rate: float = 1e-3
    dual_rate: float = 10.0
    epsilon: float = 1e-4
    initial_dual: float = 0.0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    inner: MisreportSearchConfig = Field(default_factory=_training_search)
    warm_start: bool = True
    eval_cadence: int = 100
    seed: int = 0

    @field_validator("iterations")
    @classmethod
    def _iterations(cls, v: int) -> int:
        if v < 0:
            raise ValueError("iterations must be nonnegative")
        return v

    @field_validator("batch_size", "eval_cadence")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("primal_rate")
    @classmethod
    def _rate(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("primal_rate must be positive")
        return v

    # dual_rate = 0 freezes the multipliers
    @field_validator("dual_rate", "epsilon", "initial_dual")
    @classmethod
    def _nonneg(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be nonnegative")
        return v


class RunConfig(BaseModel):
    """Shape of the ``--config`` JSON file."""
    model_config = ConfigDict(extra="forbid")

    solver: SolverConfig = Field(default_factory=SolverConfig)
    search: MisreportSearchConfig = Field(default_factory=MisreportSearchConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)


# ── Wire formats ────────────────────────────────────────────────────────

class ProblemInstanceModel(BaseModel):
    n_agents: int
    n_resources: int
    values: list[list[float]]
    demands: list[list[float]]
    budgets: list[float]
    weights: list[float]

    @model_validator(mode="after")
    def _shapes(self) -> "ProblemInstanceModel":
        n, m = self.n_agents, self.n_resources
        if n < 1 or m < 1:
            raise ValueError("n_agents and n_resources must be positive")
        for name in ("values", "demands"):
            rows = getattr(self, name)
            if len(rows) != n or any(len(r) != m for r in rows):
                raise ValueError(f"{name} must be {n} x {m}")
        if len(self.budgets) != m or len(self.weights) != n:
            raise ValueError("budgets must have length M and weights length N")
        return self


class DatasetHeader(BaseModel):
    provenance: Provenance
    seed: int
    n_agents: int
    n_resources: int
    params: dict = {}


class LayerModel(BaseModel):
    weight: list[list[float]]
    bias: list[float]


class NetworkModel(BaseModel):
    layer_sizes: list[int]
    head: OutputHead
    layers: list[LayerModel]
    l1_norm_bound: Optional[float] = None


class MechanismModel(BaseModel):
    """Mechanism JSON model file."""
    kind: MechanismKind
    rho: Optional[float] = None
    n_agents: Optional[int] = None
    n_resources: Optional[int] = None
    network: Optional[NetworkModel] = None


class TrainStateModel(BaseModel):
    iteration: int
    duals: list[float]
    mechanism: MechanismModel


class ReportRow(BaseModel):
    mechanism: str
    metric: str
    mean: float
    std: float
    normalized: Optional[float] = None


# ── API Request / Response Models ───────────────────────────────────────

class SolveRequest(BaseModel):
    instance: ProblemInstanceModel
    regularizer: Optional[list[list[float]]] = None
    solver: Optional[SolverConfig] = None


class SolutionOut(BaseModel):
    allocation: list[list[float]]
    dual_lower: list[list[float]]
    dual_upper: list[list[float]]
    dual_budget: list[float]
    objective: float
    kkt_residual: float
    iterations: int = 0


class AllocateRequest(BaseModel):
    instance: ProblemInstanceModel
    mechanism: MechanismKind = MechanismKind.PF
    rho: float = 0.5
    seed: int = 0
    model: Optional[MechanismModel] = None


class AllocationOut(BaseModel):
    mechanism: str
    allocation: list[list[float]]
    utilities: list[float]
    nsw: float
    efficiency: float
    feasible: bool
    ratios: Optional[list[float]] = None


class ExploitabilityRequest(BaseModel):
    instance: ProblemInstanceModel
    mechanism: MechanismKind = MechanismKind.PF
    rho: float = 0.5
    model: Optional[MechanismModel] = None
    search: Optional[MisreportSearchConfig] = None


class MisreportOut(BaseModel):
    agent: int
    values: list[float]
    demands: list[float]
    achieved_utility: float
    truthful_utility: float


class ExploitabilityOut(BaseModel):
    mechanism: str
    per_agent: list[float]
    mean: float
    misreports: list[MisreportOut]
