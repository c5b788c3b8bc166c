import numpy as np
import pytest
from numpy.testing import assert_allclose

from rpfnet.models import OptimizerKind, OutputHead
from rpfnet.services.network import (
    MLPGrads, MLPParams, NetworkShapeError, OptimizerState, backward, forward, init_params,
    optimizer_step,
)


def _loss(params, x, c):
    y, _ = forward(params, x)
    return float(c @ y)


@pytest.mark.parametrize("head", [OutputHead.SOFTPLUS, OutputHead.IDENTITY])
def test_backward_matches_finite_differences(head):
    params = init_params([4, 5, 3, 2], head=head, seed=1)
    # move off the tiny last layer so every path carries signal
    params.weights[-1] *= 10.0
    params.biases[-1][:] = 0.3
    x = np.array([0.3, -0.2, 0.9, 0.5])
    c = np.array([1.0, -2.0])
    _, cache = forward(params, x)
    grads, dx = backward(params, cache, c)

    h = 1e-6
    for k, W in enumerate(params.weights):
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            up, dn = params.copy(), params.copy()
            up.weights[k][idx] += h
            dn.weights[k][idx] -= h
            fd[idx] = (_loss(up, x, c) - _loss(dn, x, c)) / (2 * h)
        assert_allclose(grads.weights[k], fd, atol=1e-6)
    fd_x = np.array([(_loss(params, x + h * e, c) - _loss(params, x - h * e, c)) / (2 * h)
                     for e in np.eye(4)])
    assert_allclose(dx, fd_x, atol=1e-6)


def test_zero_network_softplus_is_log2():
    params = MLPParams([np.zeros((3, 2)), np.zeros((2, 3))], [np.zeros(3), np.zeros(2)])
    y, _ = forward(params, np.array([5.0, -1.0]))
    assert_allclose(y, np.log(2.0))


def test_identity_layer_passes_input():
    params = MLPParams([np.eye(3)], [np.zeros(3)], head=OutputHead.IDENTITY)
    y, cache = forward(params, np.array([-1.0, 0.0, 2.0]))
    assert_allclose(y, [-1.0, 0.0, 2.0])
    grads, dx = backward(params, cache, np.array([1.0, 1.0, 1.0]))
    assert_allclose(dx, 1.0)
    assert_allclose(grads.weights[0], np.tile([-1.0, 0.0, 2.0], (3, 1)))


def test_relu_subgradient_at_zero_is_zero():
    params = MLPParams([np.eye(1), np.eye(1)], [np.zeros(1), np.zeros(1)], head=OutputHead.IDENTITY)
    _, cache = forward(params, np.array([0.0]))
    grads, dx = backward(params, cache, np.array([1.0]))
    assert dx[0] == 0.0
    assert grads.weights[0][0, 0] == 0.0


def test_init_starts_near_zero_regularizer():
    params = init_params([6, 8, 4], head=OutputHead.SOFTPLUS, seed=0)
    y, _ = forward(params, np.ones(6))
    assert np.all(y < 0.1)
    assert init_params([6, 8, 4], seed=0).weights[0].tolist() == params.weights[0].tolist()


def test_sgd_step_exact():
    params = MLPParams([np.ones((1, 2))], [np.zeros(1)])
    grads = MLPGrads([np.array([[1.0, -2.0]])], [np.array([0.5])])
    state = OptimizerState.create(params, OptimizerKind.SGD, rate=0.1)
    new, state = optimizer_step(params, grads, state)
    assert_allclose(new.weights[0], [[0.9, 1.2]])
    assert_allclose(new.biases[0], [-0.05])
    assert_allclose(params.weights[0], 1.0)
    assert state.step == 1


def test_two_sgd_steps_equal_one_double_step():
    params = init_params([3, 2], seed=4)
    grads = MLPGrads([np.full((2, 3), 0.7)], [np.full(2, -0.2)])
    half = OptimizerState.create(params, OptimizerKind.SGD, rate=0.05)
    once = OptimizerState.create(params, OptimizerKind.SGD, rate=0.1)
    a, _ = optimizer_step(params, grads, half)
    a, _ = optimizer_step(a, grads, half)
    b, _ = optimizer_step(params, grads, once)
    assert_allclose(a.weights[0], b.weights[0])
    assert_allclose(a.biases[0], b.biases[0])


def test_adam_ignores_zero_gradient():
    params = init_params([3, 4, 2], seed=2)
    state = OptimizerState.create(params, OptimizerKind.ADAM, rate=0.1)
    new, _ = optimizer_step(params, MLPGrads.zeros_like(params), state)
    for W0, W1 in zip(params.weights, new.weights):
        assert_allclose(W0, W1)


def test_adam_first_step_moves_by_rate():
    params = MLPParams([np.zeros((1, 1))], [np.zeros(1)])
    state = OptimizerState.create(params, OptimizerKind.ADAM, rate=0.01)
    new, _ = optimizer_step(params, MLPGrads([np.array([[3.0]])], [np.array([-0.5])]), state)
    assert new.weights[0][0, 0] == pytest.approx(-0.01, rel=1e-6)
    assert new.biases[0][0] == pytest.approx(0.01, rel=1e-6)


def test_model_round_trip():
    params = init_params([5, 3, 2], seed=9)
    params.l1_norm_bound = 4.0
    back = MLPParams.from_model(params.to_model())
    assert back.layer_sizes == [5, 3, 2]
    assert back.l1_norm_bound == 4.0
    for W0, W1 in zip(params.weights, back.weights):
        assert_allclose(W0, W1)


def test_model_with_wrong_sizes_rejected():
    model = init_params([5, 3, 2], seed=9).to_model()
    model.layer_sizes = [5, 4, 2]
    with pytest.raises(NetworkShapeError):
        MLPParams.from_model(model)


def test_shape_errors():
    params = init_params([3, 2], seed=0)
    with pytest.raises(NetworkShapeError):
        forward(params, np.ones(4))
    with pytest.raises(NetworkShapeError):
        MLPParams([np.ones((2, 3)), np.ones((1, 3))], [np.ones(2), np.ones(1)])
    with pytest.raises(NetworkShapeError):
        init_params([3])


def test_l1_norm():
    params = MLPParams([np.array([[1.0, -2.0], [0.5, 0.5]])], [np.array([1.0, 0.0])])
    assert params.l1_norm() == pytest.approx(4.0)
