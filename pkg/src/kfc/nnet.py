"""Small fully connected networks with hand-written backprop and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    pass


def _act(name: str, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "tanh":
        return np.tanh(h)
    return h


def _act_grad(name: str, h: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        # subgradient 0 at h == 0
        return g * (h > 0)
    if name == "tanh":
        return g * (1.0 - out * out)
    return g


class Mlp:
    """Feed-forward network ``x -> act(x W + b)`` layer by layer.

    Weights are stored as ``(fan_in, fan_out)`` so a batch of row vectors is
    multiplied from the left. ``params`` is a flat list
    ``[W0, b0, W1, b1, ...]``; optimizers update it in place.
    """

    def __init__(self, layer_dims, activations=None, rng=None, hidden_activation="relu"):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ShapeError(f"invalid layer dims {layer_dims}")
        n_layers = len(layer_dims) - 1
        if activations is None:
            activations = [hidden_activation] * (n_layers - 1) + ["identity"]
        activations = list(activations)
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ShapeError(f"activations {activations} do not fit {n_layers} layers")
        self.layer_dims = layer_dims
        self.activations = activations
        rng = np.random.default_rng(rng)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def weights(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def biases(self) -> list[np.ndarray]:
        return self.params[1::2]

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.layer_dims = list(self.layer_dims)
        new.activations = list(self.activations)
        new.params = [p.copy() for p in self.params]
        return new

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input (batch, {self.in_dim}), got {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        return self._forward_cache(self._check_input(x))[-1][1]

    __call__ = forward

    def _forward_cache(self, x):
        cache = [(None, x)]
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            pre = h @ w + b
            h = _act(act, pre)
            cache.append((pre, h))
        return cache

    def forward_train(self, x):
        """Forward pass that also returns the activations needed by ``backward_cached``."""
        cache = self._forward_cache(self._check_input(x))
        return cache[-1][1], cache

    def backward(self, x, grad_out):
        """Reverse-mode gradients for upstream gradient ``grad_out``.

        Returns ``(param_grads, grad_x)`` where ``param_grads`` is aligned
        with ``params``.
        """
        x = self._check_input(x)
        return self.backward_cached(self._forward_cache(x), grad_out)

    def backward_cached(self, cache, grad_out):
        x = cache[0][1]
        grad_out = np.asarray(grad_out, dtype=float)
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ShapeError(f"upstream gradient shape {grad_out.shape} != {(x.shape[0], self.out_dim)}")
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = grad_out
        for layer in range(len(self.weights) - 1, -1, -1):
            pre, out = cache[layer + 1]
            g = _act_grad(self.activations[layer], pre, out, g)
            inp = cache[layer][1]
            grads[2 * layer] = inp.T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            g = g @ self.weights[layer].T
        return grads, g

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def spec(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "activations": list(self.activations)}

    @classmethod
    def from_spec(cls, spec: dict) -> "Mlp":
        net = cls(spec["layer_dims"], spec["activations"], rng=0)
        return net


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, x, upstream_grad):
    return net.backward(x, upstream_grad)


def huber(pred, target, delta: float = 1.0):
    """Mean Huber loss over all elements and its gradient wrt ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    r = pred - target
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r)) / max(r.size, 1)
    return float(loss.mean()) if r.size else 0.0, grad


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(lr, beta1, beta2, eps, 0,
                   [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState):
    """In-place Adam update with bias correction; returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam buffers are not aligned")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
