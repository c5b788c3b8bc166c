"""Command-line entry point: ``python -m rpfnet.cli <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import storage
from .config import settings
from .models import MechanismKind, Provenance, RunConfig
from .services import experiments as exp
from .services.datagen import gen_adversarial, gen_cauchy_perturbed, gen_truthful
from .services.mechanisms import Mechanism, build_mechanism
from .services.problem import efficiency, is_feasible, nsw, utility
from .services.solver import SolverError
from .services.training import generalization_report, train

log = logging.getLogger("rpfnet.cli")

_DEFAULT_SPLITS = {(2, 2): (4096, 1024), (10, 3): (2048, 512)}


def _splits(n: int, m: int) -> tuple[int, int]:
    return _DEFAULT_SPLITS.get((n, m), (2048, 512))


def _out(value: Optional[str], default: Path) -> Path:
    """Explicit path, else a file under the configured data / output directory."""
    return Path(value) if value else default


def _mechanism(args, run: RunConfig) -> Mechanism:
    if getattr(args, "model", None):
        return storage.load_mechanism(Path(args.model), run.solver)
    return build_mechanism(MechanismKind(args.mechanism), rho=args.rho, solver=run.solver)


# ── Commands ────────────────────────────────────────────────────────────

def cmd_datagen(args, run: RunConfig) -> int:
    count = args.count or _splits(args.agents, args.resources)[0]
    dist = Provenance(args.dist)
    if dist == Provenance.TRUTHFUL:
        ds = gen_truthful(args.agents, args.resources, count, args.seed)
    elif dist == Provenance.CAUCHY:
        ds = gen_cauchy_perturbed(args.agents, args.resources, count, args.seed, args.scale)
    else:
        ds = gen_adversarial(args.agents, args.resources, count, args.seed, run.search)
    name = f"{dist.value}_{args.agents}x{args.resources}_{args.seed}.jsonl"
    storage.save_dataset(_out(args.out, settings.data_dir / name), ds)
    return 0


def cmd_solve(args, run: RunConfig) -> int:
    inst = storage.load_instance(Path(args.instance))
    mech = _mechanism(args, run)
    alloc = mech.allocate(inst, np.random.default_rng(args.seed))
    result = {
        "mechanism": mech.name,
        "allocation": alloc.tolist(),
        "utilities": utility(alloc, inst).tolist(),
        "nsw": nsw(alloc, inst),
        "efficiency": efficiency(alloc, inst),
        "feasible": is_feasible(alloc, inst),
    }
    if args.out:
        storage.write_json(Path(args.out), result)
    else:
        print(json.dumps(result, indent=2))
    return 0


def cmd_train(args, run: RunConfig) -> int:
    data = storage.load_dataset(Path(args.data))
    test = storage.load_dataset(Path(args.test)) if args.test else None
    n, m = data.shape
    mech = build_mechanism(MechanismKind(args.kind), n, m, network=run.network, solver=run.solver)
    out = Path(args.out)
    ckpt = out.with_suffix(".state.json")

    def checkpoint(state) -> None:
        storage.save_mechanism(out, state.mechanism)
        storage.save_checkpoint(ckpt, state.iteration, state.duals, state.mechanism)

    mech, history = train(data, run.train, mech, test=test, checkpoint=checkpoint)
    storage.save_mechanism(out, mech)
    storage.write_table(out.with_suffix(".history.csv"), history)
    log.info("Trained  kind=%s  iterations=%d  model=%s", mech.name, run.train.iterations, out)
    return 0


def cmd_eval(args, run: RunConfig) -> int:
    mech = _mechanism(args, run)
    data = storage.load_dataset(Path(args.data))
    report = exp.run_table([mech], data, run.search, seed=args.seed)
    path = _out(args.report, settings.output_dir / "eval.csv")
    storage.save_report(path, report.rows, {"timing": report.timing})
    return 0


def cmd_sweep_fig1(args, run: RunConfig) -> int:
    mechs = [build_mechanism(MechanismKind.PF, solver=run.solver)]
    if args.model:
        mechs.append(storage.load_mechanism(Path(args.model), run.solver))
    ratios = np.linspace(args.low, args.high, args.points)
    rows = [r for mech in mechs for r in exp.run_fig1_sweep(mech, ratios)]
    storage.write_table(_out(args.out, settings.output_dir / "sweep_fig1.csv"), rows)
    return 0


def cmd_heatmap(args, run: RunConfig) -> int:
    mechs = [build_mechanism(MechanismKind.PF, solver=run.solver)]
    if args.model:
        mechs.append(storage.load_mechanism(Path(args.model), run.solver))
    grid = np.linspace(0.1, 1.0, args.points)
    rows = exp.run_heatmap(mechs, grid)
    storage.write_table(_out(args.out, settings.output_dir / "heatmap.csv"), rows)
    return 0


def cmd_gen_report(args, run: RunConfig) -> int:
    n, m = args.agents, args.resources
    n_train, n_test = _splits(n, m)
    n_train = args.train_count or n_train
    n_test = args.test_count or n_test
    test = gen_truthful(n, m, n_test, args.seed + 1)
    out = _out(args.out, settings.output_dir / f"{args.experiment}_{n}x{m}.csv")

    if args.experiment == "table":
        mechs: list[Mechanism] = [
            build_mechanism(MechanismKind.PF, solver=run.solver),
            build_mechanism(MechanismKind.PA, solver=run.solver),
            build_mechanism(MechanismKind.MIXTURE, rho=args.rho, solver=run.solver),
        ]
        mechs += [storage.load_mechanism(Path(p), run.solver) for p in args.model or []]
        report = exp.run_table(mechs, test, run.search, seed=args.seed)
    elif args.experiment == "shift":
        report = exp.run_shift(n, m, n_train, test, run.train, run.network, run.search,
                               args.seed, run.search)
    elif args.experiment == "ablation":
        train_set = gen_truthful(n, m, n_train, args.seed)
        report, trained = exp.run_ablation(train_set, test, run.train, run.network, run.search,
                                           args.seed)
        for name, mech in trained.items():
            storage.save_mechanism(out.with_name(f"{out.stem}.{name}.json"), mech)
    else:
        train_set = gen_truthful(n, m, max(args.sizes), args.seed)
        rows = generalization_report(MechanismKind(args.kind), train_set, test, run.train,
                                     run.network, run.search, args.sizes, args.seeds)
        storage.write_table(out, rows)
        return 0
    storage.save_report(out, report.rows, {"timing": report.timing})
    return 0


def cmd_sweep_epsilon(args, run: RunConfig) -> int:
    data = storage.load_dataset(Path(args.data))
    test = storage.load_dataset(Path(args.test))
    rows = exp.sweep_epsilon(data, test, args.epsilons, run.train, run.network, run.search)
    storage.write_table(_out(args.out, settings.output_dir / "sweep_epsilon.csv"), rows)
    return 0


def cmd_serve(args, run: RunConfig) -> int:
    import uvicorn

    uvicorn.run("rpfnet.app:app", host=args.host or settings.host, port=args.port or settings.port)
    return 0


# ── Parser ──────────────────────────────────────────────────────────────

def _add_mechanism_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mechanism", choices=[k.value for k in MechanismKind], default="pf")
    p.add_argument("--model", help="mechanism JSON model file (overrides --mechanism)")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpfnet", description=__doc__)
    parser.add_argument("--config", type=Path, help="JSON run config (solver/search/train/network)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a JSON-lines dataset")
    p.add_argument("--dist", choices=[d.value for d in Provenance], default="truthful")
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--resources", type=int, default=2)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.01)
    p.add_argument("--out", help="defaults to a file under the data directory")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("solve", help="allocate one instance")
    _add_mechanism_args(p)
    p.add_argument("--instance", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train a learned mechanism")
    p.add_argument("--kind", choices=["rpf_net", "exs_net", "softmax_net"], default="rpf_net")
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a mechanism on a dataset")
    _add_mechanism_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="defaults to eval.csv under the output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-fig1", help="misreport ratio sweep on the two-agent example")
    p.add_argument("--model")
    p.add_argument("--low", type=float, default=0.1)
    p.add_argument("--high", type=float, default=3.0)
    p.add_argument("--points", type=int, default=30)
    p.add_argument("--out", help="defaults to a file under the output directory")
    p.set_defaults(func=cmd_sweep_fig1)

    p = sub.add_parser("heatmap", help="agent-1 allocation over its value grid")
    p.add_argument("--model")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--out", help="defaults to a file under the output directory")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gen-report", help="run a comparison experiment")
    p.add_argument("--experiment", choices=["table", "shift", "ablation", "generalization"],
                   default="table")
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--resources", type=int, default=2)
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--model", action="append", help="learned mechanism file(s) to include")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--sizes", type=int, nargs="+", default=[100, 400, 1600])
    p.add_argument("--seeds", type=int, default=5, help="training seeds per size (generalization)")
    p.add_argument("--kind", choices=["rpf_net", "exs_net", "softmax_net"], default="rpf_net",
                   help="learned mechanism to train (generalization)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="defaults to a file under the output directory")
    p.set_defaults(func=cmd_gen_report)

    p = sub.add_parser("sweep-epsilon", help="train RPF-Net at several exploitability thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--epsilons", type=float, nargs="+", default=[1e-5, 1e-4, 1e-3, 1e-2])
    p.add_argument("--out", help="defaults to a file under the output directory")
    p.set_defaults(func=cmd_sweep_epsilon)

    p = sub.add_parser("serve", help="start the HTTP API")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s  %(levelname)-8s  %(name)s  %(message)s",
    )
    try:
        run = storage.load_run_config(args.config)
        return args.func(args, run)
    except (ValueError, SolverError, OSError) as e:
        log.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
