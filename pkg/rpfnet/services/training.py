"""Primal-dual training of learned mechanisms.

Loss per batch:  sum_i gamma_i * expl_i  -  logNSW, both summed over the
batch.  Misreports are found first and then held fixed while the loss is
differentiated with respect to the network weights.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .datagen import Dataset
from .exploitability import _SEARCH_FAILURES, best_misreport
from .mechanisms import LearnedMechanism, Mechanism, build_mechanism
from .network import MLPGrads, OptimizerState, optimizer_step
from .problem import (
    NonPositiveUtilityError, ProblemInstance, efficiency, log_nsw, log_nsw_grad, nsw,
    utility_grad,
)
from ..models import MechanismKind, MisreportSearchConfig, NetworkConfig, TrainConfig

log = logging.getLogger(__name__)


class SampleSolveError(RuntimeError):
    def __init__(self, sample_id: int, cause: Exception):
        super().__init__(f"sample {sample_id}: {cause}")
        self.sample_id = sample_id
        self.cause = cause


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, snapshot: "TrainState"):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class SampleMetrics:
    log_nsw: float
    nsw: float
    efficiency: float
    exploitability: np.ndarray       # per agent


@dataclass
class TrainState:
    mechanism: LearnedMechanism
    duals: np.ndarray
    optimizer: OptimizerState
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    warm: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def create(cls, mech: LearnedMechanism, cfg: TrainConfig) -> "TrainState":
        duals = np.full(mech.n_agents, cfg.initial_dual)
        opt = OptimizerState.create(mech.params, cfg.optimizer, cfg.primal_rate)
        return cls(mech, duals, opt)


def _realize(mech: Mechanism, inst: ProblemInstance, rng: Optional[np.random.Generator]) -> np.ndarray:
    if mech.stochastic:
        return mech.allocate(inst, rng or np.random.default_rng(0))
    return mech.allocate(inst)


def evaluate_sample(mech: Mechanism, inst: ProblemInstance, inner: MisreportSearchConfig,
                    rng: Optional[np.random.Generator] = None) -> SampleMetrics:
    alloc = _realize(mech, inst, rng)
    try:
        lg = log_nsw(alloc, inst)
    except NonPositiveUtilityError:
        lg = float("-inf")
    expl = np.array([best_misreport(mech, inst, i, inner).gain for i in range(inst.n_agents)])
    return SampleMetrics(lg, nsw(alloc, inst), efficiency(alloc, inst), expl)


def _metric_sums(mech: Mechanism, batch: Sequence[ProblemInstance], inner: MisreportSearchConfig,
                 rng: Optional[np.random.Generator] = None) -> tuple[float, np.ndarray, int]:
    total, counted = 0.0, 0
    expl = np.zeros(batch[0].n_agents)
    for k, inst in enumerate(batch):
        try:
            m = evaluate_sample(mech, inst, inner, rng)
        except _SEARCH_FAILURES as e:
            raise SampleSolveError(k, e) from e
        if np.isfinite(m.log_nsw):
            total += m.log_nsw
            counted += 1
        expl += m.exploitability
    if counted < len(batch):
        log.debug("logNSW undefined (zero utility) on %d of %d samples", len(batch) - counted,
                  len(batch))
    return total, expl, counted


def empirical_metrics(mech: Mechanism, batch: Sequence[ProblemInstance],
                      inner: MisreportSearchConfig,
                      rng: Optional[np.random.Generator] = None) -> tuple[float, np.ndarray]:
    """Batch sums of logNSW and of per-agent exploitability.

    Samples where some weighted agent gets zero utility have no logNSW and
    only contribute to the exploitability sum.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    total, expl, _ = _metric_sums(mech, batch, inner, rng)
    return total, expl


def mean_metrics(mech: Mechanism, instances: Sequence[ProblemInstance],
                 inner: MisreportSearchConfig) -> tuple[float, np.ndarray]:
    """Mean logNSW over samples where it is defined, mean per-agent exploitability."""
    if not instances:
        raise ValueError("instances must be nonempty")
    total, expl, counted = _metric_sums(mech, instances, inner)
    return (total / counted if counted else float("nan")), expl / len(instances)


def _sample_gradient(state: TrainState, inst: ProblemInstance, sample_id: int,
                     cfg: TrainConfig) -> tuple[MLPGrads, Optional[float], np.ndarray]:
    mech = state.mechanism
    pss = mech.forward(inst)
    alloc = pss.allocation
    try:
        lg: Optional[float] = log_nsw(alloc, inst)
        upstream = -log_nsw_grad(alloc, inst)
    except NonPositiveUtilityError:
        # no welfare term for this sample, exploitability still counts
        lg = None
        upstream = np.zeros_like(alloc)

    grads = MLPGrads.zeros_like(mech.params)
    expl = np.zeros(inst.n_agents)
    for i in range(inst.n_agents):
        warm = [state.warm[(sample_id, i)]] if cfg.warm_start and (sample_id, i) in state.warm else []
        found = best_misreport(mech, inst, i, cfg.inner, warm_starts=warm)
        expl[i] = found.gain
        if found.gain <= 0:
            continue
        if cfg.warm_start:
            state.warm[(sample_id, i)] = (found.values, found.demands)
        gamma = state.duals[i]
        if gamma == 0:
            continue
        # gamma_i * (u_i(misreport) - u_i(truth)), misreport held fixed
        upstream -= gamma * utility_grad(alloc, inst, i)
        reported = inst.with_report(i, values=found.values, demands=found.demands)
        mis = mech.forward(reported)
        g_mis = mech.backward(mis, gamma * utility_grad(mis.allocation, inst, i))
        grads.add_(g_mis.params)
    grads.add_(mech.backward(pss, upstream).params)
    return grads, lg, expl


def train_step(state: TrainState, batch: Sequence[ProblemInstance], cfg: TrainConfig,
               sample_ids: Optional[Sequence[int]] = None) -> TrainState:
    if not batch:
        raise ValueError("batch must be nonempty")
    sample_ids = list(range(len(batch))) if sample_ids is None else list(sample_ids)
    grads = MLPGrads.zeros_like(state.mechanism.params)
    lg_sum, skipped = 0.0, 0
    expl_sum = np.zeros(state.mechanism.n_agents)
    for sid, inst in zip(sample_ids, batch):
        try:
            g, lg, expl = _sample_gradient(state, inst, sid, cfg)
        except _SEARCH_FAILURES as e:
            raise SampleSolveError(sid, e) from e
        grads.add_(g)
        if lg is None:
            skipped += 1
        else:
            lg_sum += lg
        expl_sum += expl
    if skipped:
        log.debug("logNSW term skipped on %d of %d samples  iter=%d", skipped, len(batch),
                  state.iteration)

    loss = float(state.duals @ expl_sum - lg_sum)
    if not np.isfinite(loss) or not grads.is_finite():
        raise NonFiniteLossError(f"non-finite loss at iteration {state.iteration}", state)

    params, state.optimizer = optimizer_step(state.mechanism.params, grads, state.optimizer)
    state.mechanism = state.mechanism.with_params(params)
    expl_mean = expl_sum / len(batch)
    state.duals = np.maximum(0.0, state.duals + cfg.dual_rate * (expl_mean - cfg.epsilon))
    state.iteration += 1

    counted = len(batch) - skipped
    row = {"iteration": state.iteration,
           "log_nsw": lg_sum / counted if counted else float("nan"),
           "log_nsw_skipped": skipped, "lagrangian": loss}
    row.update({f"expl_{i + 1}": float(e) for i, e in enumerate(expl_mean)})
    row.update({f"gamma_{i + 1}": float(g) for i, g in enumerate(state.duals)})
    state.history.append(row)
    return state


def train(dataset: Dataset, cfg: TrainConfig, mech: LearnedMechanism,
          test: Optional[Dataset] = None,
          checkpoint: Optional[Callable[[TrainState], None]] = None) -> tuple[LearnedMechanism, list[dict]]:
    """Run ``cfg.iterations`` primal-dual steps on uniformly drawn batches."""
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset has {len(dataset)} samples, batch size is {cfg.batch_size}")
    state = TrainState.create(mech, cfg)
    rng = np.random.default_rng(cfg.seed)
    start = time.perf_counter()
    for _ in range(cfg.iterations):
        idx = rng.choice(len(dataset), size=cfg.batch_size, replace=False)
        state = train_step(state, [dataset.instances[k] for k in idx], cfg, idx.tolist())
        row = state.history[-1]
        row["wall_time_ms"] = 1000.0 * (time.perf_counter() - start)
        if state.iteration % cfg.eval_cadence == 0:
            if test is not None and len(test):
                lg, expl = mean_metrics(state.mechanism, test.instances, cfg.inner)
                row["test_log_nsw"] = lg
                row["test_expl"] = float(np.mean(expl))
            log.info("Train  iter=%d  logNSW=%.4f  expl=%s  gamma=%s  wall=%.0fms",
                     state.iteration, row["log_nsw"],
                     np.array2string(np.array([row[f"expl_{i + 1}"] for i in range(mech.n_agents)]),
                                     precision=2),
                     np.array2string(state.duals, precision=3), row["wall_time_ms"])
            if checkpoint is not None:
                checkpoint(state)
    return state.mechanism, state.history


def generalization_gaps(mech: Mechanism, train_instances: Sequence[ProblemInstance],
                        test_instances: Sequence[ProblemInstance],
                        inner: MisreportSearchConfig) -> dict:
    """|train - test| of mean logNSW and of each agent's mean exploitability."""
    train_lg, train_ex = mean_metrics(mech, train_instances, inner)
    test_lg, test_ex = mean_metrics(mech, test_instances, inner)
    row = {"log_nsw_gap": float(abs(train_lg - test_lg))}
    row.update({f"expl_gap_{i + 1}": float(abs(a - b)) for i, (a, b) in enumerate(zip(train_ex, test_ex))})
    return row


def generalization_report(kind: MechanismKind, train_set: Dataset, test_set: Dataset,
                          cfg: TrainConfig, network: Optional[NetworkConfig] = None,
                          inner: Optional[MisreportSearchConfig] = None,
                          sizes: Sequence[int] = (100, 400, 1600), seeds: int = 5) -> list[dict]:
    """Train on the first L samples for each L and seed; median train/test gaps per L."""
    inner = inner or MisreportSearchConfig()
    network = network or NetworkConfig()
    n, m = train_set.shape
    rows = []
    for L in sizes:
        if L > len(train_set):
            log.warning("Skipping L=%d  only %d training samples", L, len(train_set))
            continue
        subset = train_set.subset(L)
        gaps = []
        for s in range(seeds):
            mech = build_mechanism(kind, n, m,
                                   network=network.model_copy(update={"seed": network.seed + s}))
            mech, _ = train(subset, cfg.model_copy(update={"seed": cfg.seed + s}), mech)
            gaps.append(generalization_gaps(mech, subset.instances, test_set.instances, inner))
        row = {"L": L, "seeds": seeds}
        for key in gaps[0]:
            row[key] = float(np.median([g[key] for g in gaps]))
        row["expl_gap"] = float(np.median(
            [np.mean([v for k, v in g.items() if k.startswith("expl_gap_")]) for g in gaps]))
        log.info("Generalization  L=%d  log_nsw_gap=%.3e  expl_gap=%.3e",
                 L, row["log_nsw_gap"], row["expl_gap"])
        rows.append(row)
    return rows
