"""Small fully connected ReLU network with hand-written backprop.

Used as the regularizer generator z(v, x, b) of RPF-Net and as the trunk of
the softmax baselines.  Weights are stored as (out, in) matrices.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from ..models import LayerModel, NetworkModel, OptimizerKind, OutputHead

log = logging.getLogger(__name__)


class NetworkShapeError(ValueError):
    pass


@dataclass
class MLPParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: OutputHead = OutputHead.SOFTPLUS
    l1_norm_bound: Optional[float] = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise NetworkShapeError("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise NetworkShapeError(f"layer {k}: weight {W.shape} / bias {b.shape} mismatch")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise NetworkShapeError(f"layer {k} input {W.shape[1]} does not chain")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MLPParams":
        return MLPParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.head, self.l1_norm_bound)

    def l1_norm(self) -> float:
        """Largest row l1 norm over all layers (weights and bias together)."""
        return float(max(np.max(np.abs(W).sum(axis=1) + np.abs(b))
                         for W, b in zip(self.weights, self.biases)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b))
                   for W, b in zip(self.weights, self.biases))

    def to_model(self) -> NetworkModel:
        return NetworkModel(
            layer_sizes=self.layer_sizes,
            head=self.head,
            layers=[LayerModel(weight=W.tolist(), bias=b.tolist())
                    for W, b in zip(self.weights, self.biases)],
            l1_norm_bound=self.l1_norm_bound,
        )

    @classmethod
    def from_model(cls, model: NetworkModel) -> "MLPParams":
        params = cls(
            weights=[np.array(layer.weight, dtype=float) for layer in model.layers],
            biases=[np.array(layer.bias, dtype=float) for layer in model.layers],
            head=model.head,
            l1_norm_bound=model.l1_norm_bound,
        )
        if params.layer_sizes != list(model.layer_sizes):
            raise NetworkShapeError(
                f"layer_sizes {model.layer_sizes} disagree with weights {params.layer_sizes}")
        return params


@dataclass
class MLPGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MLPParams) -> "MLPGrads":
        return cls([np.zeros_like(W) for W in params.weights],
                   [np.zeros_like(b) for b in params.biases])

    def add_(self, other: "MLPGrads", scale: float = 1.0) -> "MLPGrads":
        for a, b in zip(self.weights, other.weights):
            a += scale * b
        for a, b in zip(self.biases, other.biases):
            a += scale * b
        return self

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.weights + self.biases)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]        # input to each layer
    pre: list[np.ndarray]           # pre-activations


@dataclass
class OptimizerState:
    kind: OptimizerKind
    rate: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: MLPParams, kind: OptimizerKind = OptimizerKind.SGD,
               rate: float = 1e-3) -> "OptimizerState":
        shapes = [p.shape for p in params.weights + params.biases]
        state = cls(kind=kind, rate=rate)
        if kind == OptimizerKind.ADAM:
            state.first = [np.zeros(s) for s in shapes]
            state.second = [np.zeros(s) for s in shapes]
        return state


def init_params(layer_sizes: list[int], head: OutputHead = OutputHead.SOFTPLUS,
                seed: int = 0) -> MLPParams:
    """Fan-in scaled uniform initialisation.

    The output layer starts small; under the softplus head its bias is set so
    the initial regularizer is close to zero and RPF-Net starts near PF.
    """
    if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
        raise NetworkShapeError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        if k == len(layer_sizes) - 2:
            W *= 0.1
            b = np.full(fan_out, -4.0) if head == OutputHead.SOFTPLUS else np.zeros(fan_out)
        weights.append(W)
        biases.append(b)
    return MLPParams(weights, biases, head)


def forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != params.input_dim:
        raise NetworkShapeError(f"input length {x.size} != {params.input_dim}")
    cache = ForwardCache([], [])
    h = x
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        pre = W @ h + b
        cache.pre.append(pre)
        if k < last:
            h = np.maximum(pre, 0.0)
        elif params.head == OutputHead.SOFTPLUS:
            h = np.logaddexp(0.0, pre)
        else:
            h = pre
    return h, cache


def backward(params: MLPParams, cache: ForwardCache,
             upstream: np.ndarray) -> tuple[MLPGrads, np.ndarray]:
    """Reverse pass.  Returns parameter gradients and d loss / d input."""
    dy = np.asarray(upstream, dtype=float).ravel()
    if dy.size != params.output_dim or len(cache.pre) != len(params.weights):
        raise NetworkShapeError("upstream / cache do not match the network")
    grads = MLPGrads.zeros_like(params)
    last = len(params.weights) - 1
    if params.head == OutputHead.SOFTPLUS:
        delta = dy * expit(cache.pre[last])
    else:
        delta = dy
    for k in range(last, -1, -1):
        grads.weights[k] = np.outer(delta, cache.inputs[k])
        grads.biases[k] = delta.copy()
        dh = params.weights[k].T @ delta
        if k > 0:
            delta = dh * (cache.pre[k - 1] > 0)   # relu'(0) = 0
    return grads, dh


def optimizer_step(params: MLPParams, grads: MLPGrads,
                   state: OptimizerState) -> tuple[MLPParams, OptimizerState]:
    """One descent step; returns new params, state is updated in place."""
    new = params.copy()
    tensors = new.weights + new.biases
    gs = grads.weights + grads.biases
    state.step += 1
    if state.kind == OptimizerKind.SGD:
        for p, g in zip(tensors, gs):
            p -= state.rate * g
        return new, state

    t = state.step
    for p, g, m, v in zip(tensors, gs, state.first, state.second):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p -= state.rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state
