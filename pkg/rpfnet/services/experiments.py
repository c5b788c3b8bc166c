"""Experiment drivers: comparison tables, misreport sweeps, heatmaps, ε and shift studies."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datagen import Dataset, gen_adversarial, gen_cauchy_perturbed, gen_truthful
from .mechanisms import (
    LearnedMechanism, Mechanism, PAMechanism, PFMechanism, build_mechanism,
)
from .problem import ProblemInstance, is_feasible, utility
from .training import SampleMetrics, evaluate_sample, train
from ..config import settings
from ..models import (
    MechanismKind, MisreportSearchConfig, NetworkConfig, ReportRow, TrainConfig,
)

log = logging.getLogger(__name__)

METRICS = ("nsw", "exploitability", "efficiency")


@dataclass
class MechanismResult:
    name: str
    samples: list[SampleMetrics]
    infeasible: int
    inference_ms: float
    train_ms: Optional[float] = None


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    results: list[MechanismResult] = field(repr=False)
    timing: list[dict] = field(default_factory=list)


def fig1_instance() -> ProblemInstance:
    """Two agents, two resources, unit demands and budgets; agent 1 is the manipulator."""
    return ProblemInstance(values=[[1.0, 0.5], [1.0, 0.25]], demands=np.ones((2, 2)),
                           budgets=np.ones(2), weights=np.ones(2))


def _evaluate_one(args) -> tuple[SampleMetrics, bool, float]:
    mech, inst, inner, seed = args
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    alloc = mech.allocate(inst, rng) if mech.stochastic else mech.allocate(inst)
    elapsed = time.perf_counter() - t0
    feasible = is_feasible(alloc, inst, settings.feasibility_tolerance)
    return evaluate_sample(mech, inst, inner, np.random.default_rng(seed)), feasible, elapsed


def evaluate_mechanism(mech: Mechanism, instances: Sequence[ProblemInstance],
                       inner: MisreportSearchConfig, seed: int = 0) -> MechanismResult:
    jobs = [(mech, inst, inner, seed + k) for k, inst in enumerate(instances)]
    if settings.workers > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            out = list(pool.map(_evaluate_one, jobs))
    else:
        out = [_evaluate_one(j) for j in jobs]
    infeasible = sum(1 for _, ok, _ in out if not ok)
    if infeasible:
        log.warning("Infeasible allocations  mechanism=%s  count=%d", mech.name, infeasible)
    ms = 1000.0 * float(np.mean([t for _, _, t in out])) if out else 0.0
    return MechanismResult(mech.name, [m for m, _, _ in out], infeasible, ms)


def _metric_values(result: MechanismResult, metric: str) -> np.ndarray:
    if metric == "nsw":
        return np.array([s.nsw for s in result.samples])
    if metric == "efficiency":
        return np.array([s.efficiency for s in result.samples])
    return np.array([float(np.mean(s.exploitability)) for s in result.samples])


def build_rows(results: Sequence[MechanismResult], reference: str = "pf") -> list[ReportRow]:
    """Mean/std rows per (mechanism, metric), normalized by the reference mechanism's mean."""
    ref = next((r for r in results if r.name == reference), None)
    ref_means = {m: float(np.mean(_metric_values(ref, m))) for m in METRICS} if ref else {}
    rows = []
    for res in results:
        for metric in METRICS:
            vals = _metric_values(res, metric)
            mean = float(np.mean(vals)) if vals.size else float("nan")
            denom = ref_means.get(metric)
            rows.append(ReportRow(
                mechanism=res.name, metric=metric, mean=mean,
                std=float(np.std(vals)) if vals.size else float("nan"),
                normalized=mean / denom if denom else None,
            ))
        rows.append(ReportRow(mechanism=res.name, metric="infeasible",
                              mean=float(res.infeasible), std=0.0))
    return rows


def timing_rows(results: Sequence[MechanismResult]) -> list[dict]:
    """Wall-clock accounting normalized to ExS-Net when present, else the fastest mechanism."""
    if not results:
        return []
    exs = next((r for r in results if r.name == MechanismKind.EXS_NET.value), None)
    base_inf = exs.inference_ms if exs else min(r.inference_ms for r in results)
    trained = [r.train_ms for r in results if r.train_ms]
    base_train = exs.train_ms if exs and exs.train_ms else (min(trained) if trained else None)
    rows = []
    for r in results:
        rows.append({
            "mechanism": r.name,
            "inference_ms": r.inference_ms,
            "inference_normalized": r.inference_ms / base_inf if base_inf else None,
            "train_ms": r.train_ms,
            "train_normalized": r.train_ms / base_train if r.train_ms and base_train else None,
        })
    return rows


def run_table(mechanisms: Sequence[Mechanism], test_set: Dataset,
              inner: MisreportSearchConfig,
              train_ms: Optional[dict[str, float]] = None, seed: int = 0) -> ExperimentReport:
    results = []
    for mech in mechanisms:
        log.info("Evaluating  mechanism=%s  samples=%d", mech.name, len(test_set))
        res = evaluate_mechanism(mech, test_set.instances, inner, seed)
        if train_ms:
            res.train_ms = train_ms.get(mech.name)
        results.append(res)
    return ExperimentReport(build_rows(results), results, timing_rows(results))


def run_fig1_sweep(mech: Mechanism, ratios: Optional[Sequence[float]] = None,
                   inst: Optional[ProblemInstance] = None) -> list[dict]:
    """Agent 1's true utility as its reported v12/v11 ratio varies (v11 held at 1)."""
    inst = inst or fig1_instance()
    ratios = np.linspace(0.1, 3.0, 30) if ratios is None else np.asarray(ratios, dtype=float)
    truthful = float(mech.expected_utility(inst, inst)[0])
    rows = []
    for r in ratios:
        reported = inst.with_report(0, values=[1.0, float(r)])
        u = float(mech.expected_utility(reported, inst)[0])
        rows.append({"mechanism": mech.name, "ratio": float(r), "utility": u,
                     "truthful_utility": truthful})
    return rows


def run_heatmap(mechanisms: Sequence[Mechanism], v_grid: Optional[Sequence[float]] = None,
                inst: Optional[ProblemInstance] = None) -> list[dict]:
    """Agent 1's allocation over a grid of its own values, agent 2 fixed."""
    inst = inst or fig1_instance()
    grid = np.linspace(0.1, 1.0, 10) if v_grid is None else np.asarray(v_grid, dtype=float)
    rows = []
    for mech in mechanisms:
        for v1 in grid:
            for v2 in grid:
                reported = inst.with_report(0, values=[float(v1), float(v2)])
                alloc = mech.allocate(reported, np.random.default_rng(0))
                u = utility(alloc, reported)
                rows.append({"mechanism": mech.name, "v11": float(v1), "v12": float(v2),
                             "a11": float(alloc[0, 0]), "a12": float(alloc[0, 1]),
                             "u1": float(u[0])})
    return rows


def saturated_cells(rows: Sequence[dict], mechanism: str, demand: float = 1.0,
                    tol: float = 1e-6) -> int:
    """Heatmap entries sitting exactly at 0 or at the demand."""
    count = 0
    for r in rows:
        if r["mechanism"] != mechanism:
            continue
        for key in ("a11", "a12"):
            if abs(r[key]) <= tol or abs(r[key] - demand) <= tol:
                count += 1
    return count


def _fit(kind: MechanismKind, train_set: Dataset, cfg: TrainConfig,
         network: Optional[NetworkConfig], test_set: Optional[Dataset] = None):
    n, m = train_set.shape
    mech = build_mechanism(kind, n, m, network=network)
    t0 = time.perf_counter()
    mech, history = train(train_set, cfg, mech, test=test_set)
    return mech, history, 1000.0 * (time.perf_counter() - t0)


def sweep_epsilon(train_set: Dataset, test_set: Dataset, epsilons: Sequence[float],
                  cfg: TrainConfig, network: Optional[NetworkConfig] = None,
                  inner: Optional[MisreportSearchConfig] = None) -> list[dict]:
    """NSW / exploitability trade-off of RPF-Net across exploitability thresholds."""
    inner = inner or MisreportSearchConfig()
    rows = []
    for eps in epsilons:
        mech, _, train_ms = _fit(MechanismKind.RPF_NET, train_set,
                                 cfg.model_copy(update={"epsilon": eps}), network)
        res = evaluate_mechanism(mech, test_set.instances, inner)
        rows.append({
            "epsilon": float(eps),
            "nsw": float(np.mean(_metric_values(res, "nsw"))),
            "exploitability": float(np.mean(_metric_values(res, "exploitability"))),
            "efficiency": float(np.mean(_metric_values(res, "efficiency"))),
            "train_ms": train_ms,
        })
        log.info("Epsilon sweep  eps=%g  nsw=%.4e  expl=%.3e", eps, rows[-1]["nsw"],
                 rows[-1]["exploitability"])
    return rows


def run_shift(n: int, m: int, n_train: int, test_set: Dataset, cfg: TrainConfig,
              network: Optional[NetworkConfig] = None,
              inner: Optional[MisreportSearchConfig] = None, seed: int = 0,
              adversarial_search: Optional[MisreportSearchConfig] = None) -> ExperimentReport:
    """RPF-Net trained on truthful, Cauchy-perturbed and adversarial data, all tested on truthful data."""
    inner = inner or MisreportSearchConfig()
    sources = {
        "rpf_net[truthful]": gen_truthful(n, m, n_train, seed),
        "rpf_net[cauchy]": gen_cauchy_perturbed(n, m, n_train, seed),
        "rpf_net[adversarial]": gen_adversarial(n, m, n_train, seed, adversarial_search),
    }
    results = [evaluate_mechanism(PFMechanism(), test_set.instances, inner, seed)]
    for name, data in sources.items():
        mech, _, train_ms = _fit(MechanismKind.RPF_NET, data, cfg, network)
        res = evaluate_mechanism(mech, test_set.instances, inner, seed)
        res.name = name
        res.train_ms = train_ms
        results.append(res)
    return ExperimentReport(build_rows(results), results, timing_rows(results))


def run_ablation(train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
                 network: Optional[NetworkConfig] = None,
                 inner: Optional[MisreportSearchConfig] = None, seed: int = 0,
                 baselines: bool = True) -> tuple[ExperimentReport, dict[str, LearnedMechanism]]:
    """Train RPF-Net, ExS-Net and the plain softmax net on the same data and compare."""
    inner = inner or MisreportSearchConfig()
    mechs: list[Mechanism] = [PFMechanism(), PAMechanism()] if baselines else []
    trained: dict[str, LearnedMechanism] = {}
    train_ms: dict[str, float] = {}
    for kind in (MechanismKind.RPF_NET, MechanismKind.EXS_NET, MechanismKind.SOFTMAX_NET):
        mech, _, ms = _fit(kind, train_set, cfg, network)
        trained[mech.name] = mech
        train_ms[mech.name] = ms
        mechs.append(mech)
    return run_table(mechs, test_set, inner, train_ms, seed), trained
