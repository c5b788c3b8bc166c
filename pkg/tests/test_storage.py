import json

import numpy as np
import pydantic
import pytest
from numpy.testing import assert_allclose

from rpfnet import storage
from rpfnet.models import MechanismKind, MisreportSearchConfig, Provenance, ReportRow
from rpfnet.services.datagen import gen_adversarial, gen_truthful
from rpfnet.services.mechanisms import MixtureMechanism, RPFNetMechanism, build_mechanism


def test_dataset_round_trip(tmp_path):
    ds = gen_truthful(2, 3, 5, seed=1)
    path = tmp_path / "data" / "train.jsonl"
    storage.save_dataset(path, ds)
    back = storage.load_dataset(path)
    assert back.provenance == Provenance.TRUTHFUL
    assert back.seed == 1
    assert back.shape == (2, 3)
    assert_allclose(back.instances[4].demands, ds.instances[4].demands)
    assert storage.load_instance(path).n_resources == 3


def test_adversarial_dataset_keeps_base(tmp_path):
    ds = gen_adversarial(2, 2, 2, seed=0, search=MisreportSearchConfig(steps=0))
    path = tmp_path / "adv.jsonl"
    storage.save_dataset(path, ds)
    back = storage.load_dataset(path)
    assert back.provenance == Provenance.ADVERSARIAL
    assert back.base is not None and len(back.base) == 2


def test_dataset_rejects_mixed_shapes(tmp_path):
    path = tmp_path / "mixed.jsonl"
    rows = [gen_truthful(2, 2, 1, seed=0).instances[0].to_dict(),
            gen_truthful(3, 2, 1, seed=0).instances[0].to_dict()]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    with pytest.raises(ValueError):
        storage.load_dataset(path)


def test_dataset_reports_bad_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"values": [[1.0]], "demands": [[1.0, 1.0]], "budgets": [1.0]}))
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        storage.load_dataset(path)


def test_single_instance_file(tmp_path, fig1):
    path = tmp_path / "fig1.json"
    storage.write_json(path, fig1.to_dict())
    assert_allclose(storage.load_instance(path).values, fig1.values)


def test_mechanism_round_trip(tmp_path, tiny_network, fig1):
    mech = build_mechanism(MechanismKind.RPF_NET, 2, 2, network=tiny_network)
    path = tmp_path / "rpf.json"
    storage.save_mechanism(path, mech)
    back = storage.load_mechanism(path)
    assert isinstance(back, RPFNetMechanism)
    assert_allclose(back.allocate(fig1), mech.allocate(fig1))

    storage.save_mechanism(tmp_path / "mix.json", MixtureMechanism(0.3))
    assert storage.load_mechanism(tmp_path / "mix.json").rho == 0.3


def test_checkpoint_round_trip(tmp_path, tiny_network):
    mech = build_mechanism(MechanismKind.EXS_NET, 2, 2, network=tiny_network)
    path = tmp_path / "ckpt.json"
    storage.save_checkpoint(path, 7, np.array([0.5, 1.25]), mech)
    state = storage.load_checkpoint(path)
    assert state.iteration == 7
    assert state.duals == [0.5, 1.25]
    assert state.mechanism.kind == MechanismKind.EXS_NET


def test_run_config(tmp_path):
    assert storage.load_run_config(None).solver.tolerance == pytest.approx(1e-8)
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"iterations": 5, "epsilon": 0.01},
                                "search": {"steps": 7}}))
    cfg = storage.load_run_config(path)
    assert cfg.train.iterations == 5
    assert cfg.search.steps == 7
    assert cfg.train.inner.steps == 25


def test_run_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"solver": {"tolerence": 1e-6}}))
    with pytest.raises(pydantic.ValidationError):
        storage.load_run_config(path)


def test_report_round_trip(tmp_path):
    rows = [ReportRow(mechanism="pf", metric="nsw", mean=0.5, std=0.1, normalized=1.0),
            ReportRow(mechanism="pf", metric="infeasible", mean=0.0, std=0.0)]
    path = tmp_path / "report.csv"
    storage.save_report(path, rows, {"timing": [{"mechanism": "pf", "inference_ms": 1.0}]})
    back = storage.load_report(path)
    assert back[0].normalized == pytest.approx(1.0)
    assert back[1].normalized is None
    twin = storage.read_json(path.with_suffix(".json"))
    assert twin["timing"][0]["mechanism"] == "pf"


def test_write_table(tmp_path):
    df = storage.write_table(tmp_path / "sweep.csv", [{"ratio": 0.3, "utility": np.float64(0.85)}])
    assert list(df.columns) == ["ratio", "utility"]
    assert (tmp_path / "sweep.csv").read_text().startswith("ratio,utility")
