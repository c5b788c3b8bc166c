"""Synthetic report distributions: uniform, Cauchy-perturbed and PF-adversarial."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exploitability import _SEARCH_FAILURES, best_misreport
from .mechanisms import PFMechanism
from .problem import Bounds, ProblemInstance
from ..models import DatasetHeader, MisreportSearchConfig, Provenance

log = logging.getLogger(__name__)

_MASK_RATE = 0.5


@dataclass
class Dataset:
    instances: list[ProblemInstance]
    provenance: Provenance
    seed: int
    params: dict = field(default_factory=dict)
    base: Optional[list[ProblemInstance]] = None       # pre-misreport parameters (adversarial)
    noise: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def shape(self) -> tuple[int, int]:
        first = self.instances[0]
        return first.n_agents, first.n_resources

    def header(self) -> DatasetHeader:
        n, m = self.shape if self.instances else (0, 0)
        return DatasetHeader(provenance=self.provenance, seed=self.seed,
                             n_agents=n, n_resources=m, params=self.params)

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.instances[:count], self.provenance, self.seed, dict(self.params),
                       self.base[:count] if self.base else None)

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        head = Dataset(self.instances[:n_train], self.provenance, self.seed, dict(self.params))
        tail = Dataset(self.instances[n_train:], self.provenance, self.seed, dict(self.params))
        return head, tail


def default_budgets(n: int, m: int) -> np.ndarray:
    return np.full(m, n / 2.0)


def _draw(rng: np.random.Generator, n: int, m: int, count: int, bounds: Bounds):
    v = rng.uniform(bounds.value_low, bounds.value_high, size=(count, n, m))
    x = rng.uniform(bounds.demand_low, bounds.demand_high, size=(count, n, m))
    mask = rng.random(size=(count, n, m)) < _MASK_RATE
    return v, x, mask


def _instances(v, x, budgets, bounds) -> list[ProblemInstance]:
    n = v.shape[1]
    return [ProblemInstance(v[k], x[k], budgets, np.ones(n), bounds) for k in range(v.shape[0])]


def gen_truthful(n: int, m: int, count: int, seed: int,
                 budgets: Optional[np.ndarray] = None, bounds: Optional[Bounds] = None) -> Dataset:
    bounds = bounds or Bounds()
    b = default_budgets(n, m) if budgets is None else np.asarray(budgets, dtype=float)
    rng = np.random.default_rng(seed)
    v, x, mask = _draw(rng, n, m, count, bounds)
    log.info("Generated truthful data  n=%d  m=%d  count=%d  seed=%d", n, m, count, seed)
    return Dataset(_instances(v, x * mask, b, bounds), Provenance.TRUTHFUL, seed,
                   {"budgets": b.tolist()})


def gen_cauchy_perturbed(n: int, m: int, count: int, seed: int, scale: float = 0.01,
                         budgets: Optional[np.ndarray] = None,
                         bounds: Optional[Bounds] = None) -> Dataset:
    """Uniform draws plus Cauchy(0, scale) noise clipped to the box; the zero mask comes last."""
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    bounds = bounds or Bounds()
    b = default_budgets(n, m) if budgets is None else np.asarray(budgets, dtype=float)
    rng = np.random.default_rng(seed)
    v, x, mask = _draw(rng, n, m, count, bounds)
    noise = scale * rng.standard_cauchy(size=(2, count, n, m))
    v = np.clip(v + noise[0], bounds.value_low, bounds.value_high)
    x = np.clip(x + noise[1], bounds.demand_low, bounds.demand_high)
    log.info("Generated Cauchy-perturbed data  n=%d  m=%d  count=%d  scale=%g", n, m, count, scale)
    return Dataset(_instances(v, x * mask, b, bounds), Provenance.CAUCHY, seed,
                   {"budgets": b.tolist(), "scale": scale}, noise=noise)


def gen_adversarial(n: int, m: int, count: int, seed: int,
                    search: Optional[MisreportSearchConfig] = None,
                    budgets: Optional[np.ndarray] = None,
                    bounds: Optional[Bounds] = None) -> Dataset:
    """Each agent's report replaced by its best PF misreport against the others' base reports."""
    search = search or MisreportSearchConfig()
    base = gen_truthful(n, m, count, seed, budgets, bounds)
    pf = PFMechanism()
    reported: list[ProblemInstance] = []
    kept_base: list[ProblemInstance] = []
    for k, inst in enumerate(base.instances):
        v = np.array(inst.values)
        x = np.array(inst.demands)
        try:
            for i in range(n):
                found = best_misreport(pf, inst, i, search)
                v[i], x[i] = found.values, found.demands
        except _SEARCH_FAILURES as e:
            log.warning("Adversarial sample skipped  sample=%d  err=%s", k, e)
            continue
        reported.append(ProblemInstance(v, x, inst.budgets, inst.weights, inst.bounds))
        kept_base.append(inst)
    log.info("Generated adversarial data  kept=%d/%d", len(reported), count)
    params = dict(base.params)
    params["search"] = search.model_dump()
    return Dataset(reported, Provenance.ADVERSARIAL, seed, params, base=kept_base)
