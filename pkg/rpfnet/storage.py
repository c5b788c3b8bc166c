"""File formats: JSON-lines datasets, mechanism models, checkpoints and reports."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import pandas as pd

from .models import (
    DatasetHeader, MechanismModel, Provenance, ReportRow, RunConfig, TrainStateModel,
)
from .services.datagen import Dataset
from .services.mechanisms import Mechanism, mechanism_from_model
from .services.problem import ProblemInstance

log = logging.getLogger(__name__)


def _prepare(path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path: Path, data: Any) -> None:
    with open(_prepare(path), "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, default=_json_default)


def read_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# ── Datasets ────────────────────────────────────────────────────────────

def save_dataset(path: Path, ds: Dataset) -> None:
    """One instance per line, preceded by a header line carrying the provenance."""
    with open(_prepare(path), "w", encoding="utf-8") as f:
        f.write(ds.header().model_dump_json() + "\n")
        for k, inst in enumerate(ds.instances):
            row = inst.to_dict()
            if ds.base is not None:
                base = ds.base[k]
                row["base_values"] = base.values.tolist()
                row["base_demands"] = base.demands.tolist()
            f.write(json.dumps(row) + "\n")
    log.info("Saved dataset  path=%s  count=%d", path, len(ds))


def load_dataset(path: Path) -> Dataset:
    header: Optional[DatasetHeader] = None
    instances: list[ProblemInstance] = []
    base: list[ProblemInstance] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "provenance" in row:
                header = DatasetHeader.model_validate(row)
                continue
            try:
                inst = ProblemInstance.from_dict(row)
            except (KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
            instances.append(inst)
            if "base_values" in row:
                base.append(ProblemInstance(row["base_values"], row["base_demands"],
                                            inst.budgets, inst.weights, inst.bounds))
    shapes = {(i.n_agents, i.n_resources) for i in instances}
    if len(shapes) > 1:
        raise ValueError(f"{path}: mixed instance shapes {sorted(shapes)}")
    if header is None:
        header = DatasetHeader(provenance=Provenance.TRUTHFUL, seed=0,
                               n_agents=instances[0].n_agents if instances else 0,
                               n_resources=instances[0].n_resources if instances else 0)
    return Dataset(instances, header.provenance, header.seed, header.params,
                   base=base if len(base) == len(instances) and base else None)


def load_instance(path: Path) -> ProblemInstance:
    """Single instance from a JSON file, or the first record of a dataset."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return load_dataset(path).instances[0]
    return ProblemInstance.from_dict(read_json(path))


# ── Mechanisms and checkpoints ──────────────────────────────────────────

def save_mechanism(path: Path, mech: Mechanism) -> None:
    with open(_prepare(path), "w", encoding="utf-8") as f:
        f.write(mech.to_model().model_dump_json(indent=2))


def load_mechanism(path: Path, solver=None) -> Mechanism:
    model = MechanismModel.model_validate(read_json(path))
    return mechanism_from_model(model, solver)


def save_checkpoint(path: Path, iteration: int, duals: np.ndarray, mech: Mechanism) -> None:
    state = TrainStateModel(iteration=iteration, duals=[float(g) for g in duals],
                            mechanism=mech.to_model())
    with open(_prepare(path), "w", encoding="utf-8") as f:
        f.write(state.model_dump_json(indent=2))


def load_checkpoint(path: Path) -> TrainStateModel:
    return TrainStateModel.model_validate(read_json(path))


def load_run_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate(read_json(path))


# ── Tables ──────────────────────────────────────────────────────────────

def write_table(path: Path, rows: Iterable[dict]) -> pd.DataFrame:
    df = pd.DataFrame(list(rows))
    df.to_csv(_prepare(path), index=False)
    return df


def save_report(path: Path, rows: list[ReportRow], extra: Optional[dict] = None) -> None:
    """CSV report plus a JSON twin next to it (same stem)."""
    path = Path(path)
    df = pd.DataFrame([r.model_dump() for r in rows],
                      columns=["mechanism", "metric", "mean", "std", "normalized"])
    df.to_csv(_prepare(path), index=False)
    payload = {"rows": [r.model_dump() for r in rows]}
    if extra:
        payload.update(extra)
    write_json(path.with_suffix(".json"), payload)
    log.info("Saved report  path=%s  rows=%d", path, len(rows))


def load_report(path: Path) -> list[ReportRow]:
    df = pd.read_csv(path)
    df = df.astype(object).where(pd.notna(df), None)
    return [ReportRow.model_validate(rec) for rec in df.to_dict(orient="records")]
