"""Dense feedforward networks with reverse-mode gradients.

Minimal on purpose: ReLU hidden layers, identity output, double precision,
x @ W + b convention. Hosts the target models, the explanation encoder, and
the explanation heads, plus an adaptive-moment optimizer with decoupled
weight decay and a spectral-norm Lipschitz upper bound.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class NetError(ValueError):
    """Shape mismatch, non-finite parameters, or unsupported configuration."""


CHECKPOINT_FORMAT = "explab-ffnet"
CHECKPOINT_VERSION = 1


@dataclass
class FeedForwardNet:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"  # hidden activation; output is always identity

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise NetError("need at least an input and an output dimension")
        if self.activation not in ("relu", "identity"):
            raise NetError(f"unsupported activation {self.activation!r}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise NetError("parameter count does not match layer_dims")
        for k in range(n_layers):
            expect = (self.layer_dims[k], self.layer_dims[k + 1])
            if self.weights[k].shape != expect:
                raise NetError(f"layer {k}: weight shape {self.weights[k].shape}, expected {expect}")
            if self.biases[k].shape != (self.layer_dims[k + 1],):
                raise NetError(f"layer {k}: bias shape {self.biases[k].shape}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list [W0, b0, W1, b1, ...], aliased not copied."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "FeedForwardNet":
        return FeedForwardNet(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


def init_net(layer_dims, seed: int = 0, activation: str = "relu") -> FeedForwardNet:
    """He-style uniform initialization scaled by fan-in; zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return FeedForwardNet(list(layer_dims), weights, biases, activation)


def _check_params_finite(net: FeedForwardNet) -> None:
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NetError(f"non-finite parameter detected in layer {k}")


def forward(net: FeedForwardNet, batch: np.ndarray, return_cache: bool = False):
    """Apply the network row-wise to a batch of shape (n, input_dim).

    With return_cache=True also returns the layer inputs needed by backward().
    """
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[1] != net.input_dim:
        raise NetError(f"batch has {X.shape[1]} columns, net expects {net.input_dim}")
    _check_params_finite(net)
    layer_inputs = [X]
    a = X
    for k in range(net.n_layers):
        z = a @ net.weights[k] + net.biases[k]
        if k < net.n_layers - 1 and net.activation == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = z
        layer_inputs.append(a)
    if return_cache:
        return a, layer_inputs
    return a


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray  # dL/d(batch), for chaining through composed nets

    def params(self) -> list[np.ndarray]:
        out = []
        for dW, db in zip(self.weights, self.biases):
            out.extend((dW, db))
        return out


def backward(net: FeedForwardNet, cache: list, grad_output: np.ndarray) -> Gradients:
    """Parameter gradients given dL/d(output) for the forward pass that
    produced `cache`. Gradients are summed over the batch rows.
    """
    if cache is None or len(cache) != net.n_layers + 1:
        raise NetError("backward called without a matching forward cache")
    delta = np.atleast_2d(np.asarray(grad_output, dtype=np.float64))
    if delta.shape != cache[-1].shape:
        raise NetError(f"grad_output shape {delta.shape} != output shape {cache[-1].shape}")
    grad_w = [None] * net.n_layers
    grad_b = [None] * net.n_layers
    for k in range(net.n_layers - 1, -1, -1):
        a_in = cache[k]
        grad_w[k] = a_in.T @ delta
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ net.weights[k].T
            if net.activation == "relu":
                # cache[k] is the post-relu activation; its zero coordinates
                # had non-positive pre-activation
                delta = delta * (cache[k] > 0.0)
    return Gradients(grad_w, grad_b, delta @ net.weights[0].T if net.n_layers >= 1 else delta)


@dataclass
class OptimizerState:
    """Adaptive-moment estimation with decoupled weight decay."""

    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise NetError("learning rate must be positive")
        if self.weight_decay < 0:
            raise NetError("weight decay must be non-negative")


def optimizer_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One in-place update of `params`. Decay is decoupled: applied directly
    to the parameters, not mixed into the gradient moments.
    """
    if len(params) != len(grads):
        raise NetError("params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise NetError(f"param shape {p.shape} != grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NetError("non-finite gradient")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay > 0:
            p -= lr * state.weight_decay * p


@dataclass
class LipschitzEstimate:
    value: float
    layer_norms: list[float]


def spectral_norm(W: np.ndarray, n_iters: int = 50, tol: float = 1e-8) -> float:
    """Largest singular value by power iteration on W^T W."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise NetError("spectral_norm expects a matrix")
    rng = np.random.default_rng(0)  # fixed start keeps the estimate deterministic
    u = rng.normal(size=W.shape[0])
    u /= np.linalg.norm(u)
    sigma = 0.0
    for _ in range(n_iters):
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        u /= nu
        if abs(nu - sigma) <= tol * max(1.0, sigma):
            sigma = nu
            break
        sigma = nu
    return float(sigma)


def lipschitz_upper_bound(net: FeedForwardNet) -> LipschitzEstimate:
    """Product of layer spectral norms; valid since ReLU and identity are
    1-Lipschitz."""
    if net.activation not in ("relu", "identity"):
        raise NetError(f"unsupported activation {net.activation!r}")
    norms = [spectral_norm(W) for W in net.weights]
    return LipschitzEstimate(float(np.prod(norms)), norms)


def save_checkpoint(net: FeedForwardNet, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "weights": [W.tolist() for W in net.weights],  # row-major
        "biases": [b.tolist() for b in net.biases],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> FeedForwardNet:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise NetError(f"{path}: not a {CHECKPOINT_FORMAT} container")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise NetError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return FeedForwardNet(
        [int(d) for d in payload["layer_dims"]],
        [np.array(W, dtype=np.float64) for W in payload["weights"]],
        [np.array(b, dtype=np.float64) for b in payload["biases"]],
        payload["activation"],
    )


def scalar_fn(net: FeedForwardNet):
    """Wrap a single-output net as a batched callable X (n, M) -> (n,)."""
    if net.output_dim != 1:
        raise NetError("scalar_fn needs a single-output network")

    def f(X):
        return forward(net, np.atleast_2d(X))[:, 0]

    return f
