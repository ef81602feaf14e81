"""Small dense networks with hand-written backprop, softmax and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

ACTIVATIONS = ("relu", "sigmoid", "identity")


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(kind: str, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(kind: str, z, a, g):
    if kind == "relu":
        return g * (z > 0)
    if kind == "sigmoid":
        return g * a * (1.0 - a)
    return g


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"weight {self.weight.shape} and bias {self.bias.shape} do not match")


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError("consecutive layer dimensions do not chain")

    @classmethod
    def init(cls, sizes, activations, rng, scale: float | None = None) -> "DenseNet":
        """He-style uniform init; ``sizes`` lists widths from input to output."""
        layers = []
        for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
            bound = scale if scale is not None else np.sqrt(6.0 / fan_in) / 2
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_params(self, params) -> "DenseNet":
        if len(params) != 2 * len(self.layers):
            raise ShapeError("parameter list length does not match the network")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError("parameter shapes do not match the network")
            layers.append(Layer(np.array(w), np.array(b), layer.activation))
        return DenseNet(layers)

    def copy(self) -> "DenseNet":
        return self.with_params(self.params())

    def to_json_obj(self) -> list[dict]:
        return [
            {"weight": l.weight.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
            for l in self.layers
        ]

    @classmethod
    def from_json_obj(cls, obj) -> "DenseNet":
        return cls([Layer(np.array(d["weight"]), np.array(d["bias"]), d["activation"]) for d in obj])

    def __call__(self, x):
        return forward(self, x)[0]


@dataclass
class Cache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    shapes: list[tuple]


def forward(net: DenseNet, x) -> tuple[np.ndarray, Cache]:
    """Apply the network to a vector or to a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != network input dim {net.input_dim}")
    inputs, pre, post = [], [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight + layer.bias
        h = _activate(layer.activation, z)
        pre.append(z)
        post.append(h)
    return h, Cache(inputs, pre, post, [l.weight.shape for l in net.layers])


def backward(net: DenseNet, cache: Cache, grad_output) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients; batch rows are summed into the parameter gradients.

    Returns parameter gradients in ``net.params()`` order and the input gradient.
    """
    if cache.shapes != [l.weight.shape for l in net.layers]:
        raise ShapeError("cache does not come from this network")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"output gradient {g.shape} != output {cache.post[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        gz = _activation_grad(layer.activation, cache.pre[i], cache.post[i], g)
        h = cache.inputs[i]
        if gz.ndim == 1:
            grads[2 * i] = np.outer(h, gz)
            grads[2 * i + 1] = gz.copy()
        else:
            grads[2 * i] = h.reshape(-1, h.shape[-1]).T @ gz.reshape(-1, gz.shape[-1])
            grads[2 * i + 1] = gz.reshape(-1, gz.shape[-1]).sum(axis=0)
        g = gz @ layer.weight.T
    return grads, g


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ShapeError("softmax of an empty vector")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ShapeError("log_softmax of an empty vector")
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass
class AdamState:
    lr: float = 0.05
    lr_decay: float = 0.95
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def end_epoch(self) -> None:
        self.lr *= self.lr_decay


def adam_step(state: AdamState, params, grads) -> list[np.ndarray]:
    """One Adam update with decoupled weight decay. Mutates ``state``; returns new params."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif [m.shape for m in state.m] != [p.shape for p in params]:
        raise ShapeError("optimizer moments do not match parameter shapes")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append(p - state.lr * (update + state.weight_decay * p))
    return out


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec, like) -> list[np.ndarray]:
    out, i = [], 0
    for a in like:
        out.append(np.asarray(vec[i : i + a.size]).reshape(a.shape))
        i += a.size
    return out
