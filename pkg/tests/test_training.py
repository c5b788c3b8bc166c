import numpy as np
import pytest
from numpy.testing import assert_allclose

from rpfnet.models import MechanismKind, MisreportSearchConfig, OptimizerKind, TrainConfig
from rpfnet.services.datagen import gen_truthful
from rpfnet.services.mechanisms import PFMechanism, build_mechanism
from rpfnet.services.problem import ProblemInstance, log_nsw, utility
from rpfnet.services.training import (
    TrainState, _sample_gradient, empirical_metrics, evaluate_sample, generalization_gaps,
    generalization_report, mean_metrics, train, train_step,
)

NO_SEARCH = MisreportSearchConfig(steps=0)


@pytest.fixture
def small_cfg():
    return TrainConfig(iterations=2, batch_size=2, primal_rate=1e-2, dual_rate=1.0,
                       optimizer=OptimizerKind.SGD, eval_cadence=1,
                       inner=MisreportSearchConfig(steps=2, restarts=1))


@pytest.fixture
def rpf(tiny_network):
    return build_mechanism(MechanismKind.RPF_NET, 2, 2, network=tiny_network)


def _dense(count, seed):
    """Truthful draws with every agent active, so logNSW is finite."""
    ds = gen_truthful(2, 2, 10 * count + 10, seed)
    ds.instances = [inst for inst in ds.instances if inst.active.all()][:count]
    assert len(ds) == count
    return ds


def test_symmetric_metrics(symmetric):
    lg, expl = empirical_metrics(PFMechanism(), [symmetric], NO_SEARCH)
    assert lg == pytest.approx(0.0, abs=1e-6)
    assert_allclose(expl, 0.0)


def test_duplicated_sample_doubles_sums(fig1, quick_search):
    once = empirical_metrics(PFMechanism(), [fig1], quick_search)
    twice = empirical_metrics(PFMechanism(), [fig1, fig1], quick_search)
    assert twice[0] == pytest.approx(2 * once[0])
    assert_allclose(twice[1], 2 * once[1])


def test_empirical_metrics_rejects_empty_batch():
    with pytest.raises(ValueError):
        empirical_metrics(PFMechanism(), [], NO_SEARCH)


def test_evaluate_sample_fields(fig1):
    m = evaluate_sample(PFMechanism(), fig1, NO_SEARCH)
    assert m.log_nsw == pytest.approx(2 * np.log(0.75))
    assert m.efficiency == pytest.approx(1.0)
    assert m.exploitability.shape == (2,)


def test_frozen_duals_stay_at_zero(rpf, small_cfg):
    cfg = small_cfg.model_copy(update={"dual_rate": 0.0})
    state = TrainState.create(rpf, cfg)
    state = train_step(state, _dense(2, 0).instances, cfg)
    assert_allclose(state.duals, 0.0)
    assert state.iteration == 1


def test_dual_update_is_projected(rpf, small_cfg):
    cfg = small_cfg.model_copy(update={"epsilon": 10.0, "initial_dual": 0.5})
    state = TrainState.create(rpf, cfg)
    state = train_step(state, _dense(2, 0).instances, cfg)
    # exploitability never reaches 10, so gamma is pushed to its floor
    assert_allclose(state.duals, 0.0)


def test_step_moves_weights(rpf, small_cfg, fig1):
    # fig1 splits resource 1, so the allocation responds to z
    state = TrainState.create(rpf, small_cfg)
    before = rpf.params.copy()
    state = train_step(state, [fig1, fig1], small_cfg)
    after = state.mechanism.params
    assert any(not np.allclose(p0, p1, rtol=0.0, atol=1e-9)
               for p0, p1 in zip(before.weights + before.biases, after.weights + after.biases))
    row = state.history[-1]
    assert {"iteration", "log_nsw", "lagrangian", "expl_1", "expl_2", "gamma_1", "gamma_2"} <= set(row)


def test_zero_iterations_returns_initial_mechanism(rpf, small_cfg):
    cfg = small_cfg.model_copy(update={"iterations": 0})
    mech, history = train(_dense(2, 0), cfg, rpf)
    assert history == []
    for W0, W1 in zip(rpf.params.weights, mech.params.weights):
        assert_allclose(W0, W1)


def test_train_is_deterministic(tiny_network, small_cfg):
    data = _dense(4, 2)
    runs = []
    for _ in range(2):
        mech = build_mechanism(MechanismKind.RPF_NET, 2, 2, network=tiny_network)
        runs.append(train(data, small_cfg, mech)[0])
    for W0, W1 in zip(runs[0].params.weights, runs[1].params.weights):
        assert_allclose(W0, W1)


def test_train_history_and_checkpoints(rpf, small_cfg):
    seen = []
    mech, history = train(_dense(4, 3), small_cfg, rpf, test=_dense(2, 4),
                          checkpoint=lambda s: seen.append(s.iteration))
    assert len(history) == 2
    assert seen == [1, 2]
    assert {"wall_time_ms", "test_log_nsw", "test_expl"} <= set(history[-1])
    assert history[1]["wall_time_ms"] >= history[0]["wall_time_ms"]


def test_train_needs_a_full_batch(rpf, small_cfg):
    with pytest.raises(ValueError):
        train(_dense(1, 0), small_cfg, rpf)


def test_softmax_baseline_trains(tiny_network, small_cfg):
    mech = build_mechanism(MechanismKind.EXS_NET, 2, 2, network=tiny_network)
    trained, history = train(_dense(4, 5), small_cfg, mech)
    assert trained.params.is_finite()
    assert len(history) == 2


def test_generalization_gap_is_zero_on_same_data():
    data = _dense(6, 6)
    gaps = generalization_gaps(PFMechanism(), data.instances, data.instances, NO_SEARCH)
    assert gaps["log_nsw_gap"] == pytest.approx(0.0, abs=1e-12)
    assert gaps["expl_gap_1"] == 0.0 and gaps["expl_gap_2"] == 0.0


def test_generalization_report_trains_per_size(tiny_network, small_cfg):
    cfg = small_cfg.model_copy(update={"iterations": 1})
    rows = generalization_report(MechanismKind.RPF_NET, _dense(4, 7), _dense(3, 8), cfg,
                                 tiny_network, NO_SEARCH, sizes=[2, 4, 50], seeds=2)
    assert [r["L"] for r in rows] == [2, 4]
    for row in rows:
        assert row["seeds"] == 2
        assert {"log_nsw_gap", "expl_gap", "expl_gap_1", "expl_gap_2"} <= set(row)
        assert row["log_nsw_gap"] >= 0.0


def test_zero_demand_agent_skips_welfare_term(rpf, small_cfg):
    inst = ProblemInstance([[1.0, 0.5], [1.0, 0.25]], [[1.0, 1.0], [0.0, 0.0]], [1.0, 1.0],
                           [1.0, 1.0])
    cfg = small_cfg.model_copy(update={"inner": NO_SEARCH})
    state = train_step(TrainState.create(rpf, cfg), [inst, inst], cfg)
    row = state.history[-1]
    assert row["log_nsw_skipped"] == 2
    assert np.isnan(row["log_nsw"])
    assert np.isfinite(row["lagrangian"])


def test_mean_metrics_skip_undefined_log_nsw(fig1):
    inst = ProblemInstance([[1.0, 0.5], [1.0, 0.25]], [[1.0, 1.0], [0.0, 0.0]], [1.0, 1.0],
                           [1.0, 1.0])
    lg, expl = mean_metrics(PFMechanism(), [fig1, inst], NO_SEARCH)
    assert lg == pytest.approx(2 * np.log(0.75), abs=1e-6)
    assert expl.shape == (2,)


def _interior_rpf(tiny_network, solver):
    mech = build_mechanism(MechanismKind.RPF_NET, 2, 2, network=tiny_network, solver=solver)
    params = mech.params.copy()
    params.biases[-1][:] = -1.0
    return mech.with_params(params)


def _frozen_loss(mech, inst, duals, misreports):
    alloc = mech.allocate(inst)
    u_true = utility(alloc, inst)
    total = -log_nsw(alloc, inst)
    for i, (v, x) in misreports.items():
        mis = mech.allocate(inst.with_report(i, values=v, demands=x))
        total += duals[i] * (utility(mis, inst)[i] - u_true[i])
    return total


def test_sample_gradient_matches_finite_differences(tiny_network, tight_solver, fig1):
    mech = _interior_rpf(tiny_network, tight_solver)
    cfg = TrainConfig(inner=MisreportSearchConfig(steps=10, restarts=1,
                                                  projection_box=(0.1, 1.0, 0.1, 1.0)))
    state = TrainState.create(mech, cfg)
    state.duals = np.array([1.0, 0.5])
    grads, _, _ = _sample_gradient(state, fig1, 0, cfg)
    misreports = {i: state.warm[(0, i)] for i in range(2) if (0, i) in state.warm}

    h = 1e-5
    last = len(mech.params.weights) - 1
    tensors = [("biases", last), ("weights", last)]
    for attr, k in tensors:
        analytic = getattr(grads, attr)[k]
        fd = np.zeros_like(analytic)
        for idx in np.ndindex(analytic.shape):
            shifted = []
            for sign in (1.0, -1.0):
                params = mech.params.copy()
                getattr(params, attr)[k][idx] += sign * h
                shifted.append(_frozen_loss(mech.with_params(params), fig1, state.duals, misreports))
            fd[idx] = (shifted[0] - shifted[1]) / (2 * h)
        assert_allclose(analytic, fd, rtol=1e-3, atol=1e-5)


def test_welfare_only_training_improves_log_nsw(tiny_network, fig1):
    mech = _interior_rpf(tiny_network, None)
    cfg = TrainConfig(iterations=100, batch_size=1, primal_rate=1e-3, dual_rate=0.0,
                      optimizer=OptimizerKind.SGD, inner=NO_SEARCH)
    state = TrainState.create(mech, cfg)
    for _ in range(100):
        state = train_step(state, [fig1], cfg)
    lg = [row["log_nsw"] for row in state.history]
    assert all(b >= a - 1e-7 for a, b in zip(lg, lg[1:]))
    assert lg[-1] > lg[0]
