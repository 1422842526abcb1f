"""Fully connected networks: forward pass, losses, backprop gradient, Hessian.

Layers are numbered 1..d as in ``f(x) = W_d g(... g(W_1 x + b_1) ...) + b_d``;
``weights[k - 1]`` holds ``W_k`` with shape ``(n_k, n_{k-1})``. Neuron indices
inside a layer are 0-based.

Canonical flat order: layer by layer, each layer's weight matrix row-major
followed by its bias vector.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import DimensionError, Rng

ACTIVATIONS = ("relu", "tanh", "softplus")
LOSS_KINDS = ("mse", "normalized_mse", "cross_entropy")
HESSIAN_CAP = 3000


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        # same values as logaddexp(0, z), several times faster
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    raise ValueError(f"unknown activation {name!r}")


def _act_deriv(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)  # g'(0) = 0
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic sigmoid, overflow-free
    raise ValueError(f"unknown activation {name!r}")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Weights, biases and hidden activations of an MLP.

    Arrays are copied on construction and made read-only; use
    :meth:`replace_layer` or the helpers in :mod:`permland.symmetry` to derive
    modified networks.
    """

    weights: tuple
    biases: tuple
    activations: tuple

    def __post_init__(self):
        ws = tuple(_frozen(w) for w in self.weights)
        bs = tuple(_frozen(b) for b in self.biases)
        acts = tuple(self.activations)
        if len(ws) == 0 or len(ws) != len(bs):
            raise DimensionError("need one bias per weight matrix and at least one layer")
        if len(acts) != len(ws) - 1:
            raise DimensionError(f"need {len(ws) - 1} hidden activations, got {len(acts)}")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for k, (w, b) in enumerate(zip(ws, bs), start=1):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k > 1 and w.shape[1] != ws[k - 2].shape[0]:
                raise DimensionError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} has {ws[k - 2].shape[0]} neurons"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "activations", acts)

    @property
    def depth(self) -> int:
        """Number of affine layers d."""
        return len(self.weights)

    @property
    def widths(self) -> tuple[int, ...]:
        """(n_0, n_1, ..., n_d)."""
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def layer_offsets(self) -> list[int]:
        """Start offset of each layer's block in the flat vector (plus the total)."""
        offs = [0]
        for w, b in zip(self.weights, self.biases):
            offs.append(offs[-1] + w.size + b.size)
        return offs

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat(self, theta) -> "NetworkParams":
        return unflatten(theta, self)

    def replace_layer(self, k: int, weights=None, bias=None) -> "NetworkParams":
        ws, bs = list(self.weights), list(self.biases)
        if weights is not None:
            ws[k - 1] = weights
        if bias is not None:
            bs[k - 1] = bias
        return NetworkParams(ws, bs, self.activations)

    def mutable_copy(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]

    def equals(self, other: "NetworkParams") -> bool:
        """Bit-exact equality of all parameters and activations."""
        return (
            self.activations == other.activations
            and len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    def index_of(self, k: int, kind: str, i: int, j: int = 0) -> int:
        """Flat index of ``W_k[i, j]`` (kind='w') or ``b_k[i]`` (kind='b')."""
        off = self.layer_offsets()[k - 1]
        w = self.weights[k - 1]
        if kind == "w":
            return off + i * w.shape[1] + j
        if kind == "b":
            return off + w.size + i
        raise ValueError(kind)


def unflatten(theta, template: NetworkParams) -> NetworkParams:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (template.n_params,):
        raise DimensionError(f"flat vector has length {theta.size}, network needs {template.n_params}")
    ws, bs, pos = [], [], 0
    for w, b in zip(template.weights, template.biases):
        ws.append(theta[pos : pos + w.size].reshape(w.shape))
        pos += w.size
        bs.append(theta[pos : pos + b.size])
        pos += b.size
    return NetworkParams(ws, bs, template.activations)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs ``(T, n_0)`` and regression targets ``(T, n_d)``; optional class labels."""

    inputs: np.ndarray
    targets: np.ndarray
    labels: np.ndarray | None = field(default=None)

    def __post_init__(self):
        x = _frozen(self.inputs)
        y = _frozen(self.targets)
        if x.ndim != 2 or y.ndim != 2:
            raise DimensionError("inputs and targets must be 2-d (patterns x dims)")
        if x.shape[0] != y.shape[0] or x.shape[0] < 1:
            raise DimensionError(f"row counts differ or empty: {x.shape[0]} vs {y.shape[0]}")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64)
            lab.flags.writeable = False
            if lab.shape != (x.shape[0],):
                raise DimensionError("labels must have one entry per pattern")
            object.__setattr__(self, "labels", lab)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def check(self, net: NetworkParams) -> None:
        widths = net.widths
        if self.inputs.shape[1] != widths[0] or self.targets.shape[1] != widths[-1]:
            raise DimensionError(
                f"data dims ({self.inputs.shape[1]} -> {self.targets.shape[1]}) "
                f"do not match network ({widths[0]} -> {widths[-1]})"
            )


def _forward_layers(ws, bs, acts, x: np.ndarray):
    pre, post = [], [x]
    h = x
    for k, (w, b) in enumerate(zip(ws, bs)):
        z = h @ w.T + b
        pre.append(z)
        h = _act(acts[k], z) if k < len(acts) else z
        post.append(h)
    return pre, post


def _forward_cache(net: NetworkParams, x: np.ndarray):
    return _forward_layers(net.weights, net.biases, net.activations, x)


def forward(net: NetworkParams, x) -> np.ndarray:
    """Network output for one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.widths[0]:
        raise DimensionError(f"input has shape {x.shape}, network expects {net.widths[0]} features")
    out = _forward_cache(net, xb)[1][-1]
    return out[0] if single else out


def hidden_activations(net: NetworkParams, x, k: int) -> np.ndarray:
    """Post-activation outputs of hidden layer k for a batch."""
    return _forward_cache(net, np.atleast_2d(np.asarray(x, dtype=np.float64)))[1][k]


def _loss_scale(data: Dataset, kind: str) -> float:
    if kind in ("mse", "cross_entropy"):
        return 1.0
    if kind == "normalized_mse":
        denom = float(np.mean(data.targets**2))
        if denom == 0.0:
            raise ZeroDivisionError("normalized_mse is undefined for all-zero targets")
        return 1.0 / denom
    raise ValueError(f"unknown loss kind {kind!r}")


def _value_and_output_grad(out: np.ndarray, targets: np.ndarray, kind: str, scale: float):
    """Loss and its derivative with respect to the network output."""
    t = targets.shape[0]
    if kind == "cross_entropy":
        # softmax over outputs, targets are class probabilities (one-hot)
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        value = float(-np.sum(targets * logp) / t)
        return value, (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / t
    r = out - targets
    return float(np.sum(r * r) / t * scale), (2.0 * scale / t) * r


def loss(net: NetworkParams, data: Dataset, kind: str = "mse") -> float:
    """Mean over patterns of the squared error; 'normalized_mse' divides by <y^2>.

    'cross_entropy' applies a softmax to the outputs and scores it against
    the targets as class probabilities.
    """
    data.check(net)
    scale = _loss_scale(data, kind)
    return _value_and_output_grad(forward(net, data.inputs), data.targets, kind, scale)[0]


class FlatObjective:
    """Loss and gradient as functions of the canonical flat parameter vector.

    Skips the validation done by :class:`NetworkParams`, which matters inside
    optimizer loops.
    """

    def __init__(self, template: NetworkParams, data: Dataset, kind: str = "mse"):
        data.check(template)
        self.template = template
        self.data = data
        self.kind = kind
        self.scale = _loss_scale(data, kind)
        self.n = template.n_params
        self._shapes = [(w.shape, b.shape[0]) for w, b in zip(template.weights, template.biases)]
        self._acts = template.activations
        self.n_evals = 0

    def _views(self, theta):
        ws, bs, pos = [], [], 0
        for (shape, nb) in self._shapes:
            size = shape[0] * shape[1]
            ws.append(theta[pos : pos + size].reshape(shape))
            pos += size
            bs.append(theta[pos : pos + nb])
            pos += nb
        return ws, bs

    def value(self, theta) -> float:
        self.n_evals += 1
        ws, bs = self._views(np.asarray(theta, dtype=np.float64))
        out = _forward_layers(ws, bs, self._acts, self.data.inputs)[1][-1]
        if self.kind == "cross_entropy":
            return _value_and_output_grad(out, self.data.targets, self.kind, self.scale)[0]
        r = out - self.data.targets
        return float(np.sum(r * r) / self.data.size * self.scale)

    def value_and_grad(self, theta):
        self.n_evals += 1
        theta = np.asarray(theta, dtype=np.float64)
        ws, bs = self._views(theta)
        pre, post = _forward_layers(ws, bs, self._acts, self.data.inputs)
        # delta = dL/d(output pre-activation)
        value, delta = _value_and_output_grad(post[-1], self.data.targets, self.kind, self.scale)
        grads = [None] * len(ws)
        for k in range(len(ws) - 1, -1, -1):
            gw = delta.T @ post[k]
            gb = delta.sum(axis=0)
            grads[k] = np.concatenate([gw.ravel(), gb])
            if k > 0:
                delta = (delta @ ws[k]) * _act_deriv(self._acts[k - 1], pre[k - 1])
        return value, np.concatenate(grads)

    def grad(self, theta) -> np.ndarray:
        return self.value_and_grad(theta)[1]


def loss_and_gradient(net: NetworkParams, data: Dataset, kind: str = "mse"):
    """Loss and its exact gradient (canonical flat order) by backpropagation."""
    return FlatObjective(net, data, kind).value_and_grad(net.flatten())


def gradient(net: NetworkParams, data: Dataset, kind: str = "mse") -> np.ndarray:
    return loss_and_gradient(net, data, kind)[1]


def hessian(net: NetworkParams, data: Dataset, kind: str = "mse", cap: int = HESSIAN_CAP,
            return_asymmetry: bool = False):
    """Dense Hessian from central differences of the exact gradient.

    Each column uses step ``h = 1e-5 * max(1, ||theta||_inf)``; the result is
    symmetrized. With ``return_asymmetry`` the relative asymmetry
    ``||H - H^T||_F / ||H||_F`` before symmetrization is returned too.
    """
    n = net.n_params
    if n > cap:
        raise ValueError(f"network has {n} parameters, Hessian cap is {cap}")
    obj = FlatObjective(net, data, kind)
    theta = net.flatten()
    h = 1e-5 * max(1.0, float(np.max(np.abs(theta))))
    hmat = np.empty((n, n))
    for i in range(n):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        hmat[:, i] = (obj.grad(tp) - obj.grad(tm)) / (tp[i] - tm[i])
    norm = float(np.linalg.norm(hmat))
    asym = float(np.linalg.norm(hmat - hmat.T)) / norm if norm > 0 else 0.0
    sym = 0.5 * (hmat + hmat.T)
    return (sym, asym) if return_asymmetry else sym


# --------------------------------------------------------------------------- #
# Construction and checkpoints
# --------------------------------------------------------------------------- #


def init_network(widths: Sequence[int], activation: str | Sequence[str], rng: Rng,
                 bias_scale: float | None = None) -> NetworkParams:
    """Normal weights with standard deviation 1/sqrt(fan_in).

    Biases use the same scale unless ``bias_scale`` is given.
    """
    d = len(widths) - 1
    acts = [activation] * (d - 1) if isinstance(activation, str) else list(activation)
    ws, bs = [], []
    for k in range(1, d + 1):
        std = 1.0 / math.sqrt(widths[k - 1])
        ws.append(rng.normal_array((widths[k], widths[k - 1])) * std)
        bstd = std if bias_scale is None else bias_scale
        bs.append(rng.normal_array(widths[k]) * bstd)
    return NetworkParams(ws, bs, acts)


def network_to_dict(net: NetworkParams, meta: dict | None = None) -> dict:
    layers = []
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        act = net.activations[k] if k < len(net.activations) else "identity"
        layers.append({"weights": w.tolist(), "bias": b.tolist(), "activation": act})
    return {"layers": layers, "meta": dict(meta or {})}


def network_from_dict(obj: dict) -> NetworkParams:
    layers = obj["layers"]
    ws = [np.array(layer["weights"], dtype=np.float64) for layer in layers]
    bs = [np.array(layer["bias"], dtype=np.float64) for layer in layers]
    acts = [layer["activation"] for layer in layers[:-1]]
    if layers[-1].get("activation", "identity") != "identity":
        raise ValueError("output layer must be affine (activation 'identity')")
    return NetworkParams(ws, bs, acts)


def save_checkpoint(net: NetworkParams, path, meta: dict | None = None) -> None:
    # json writes floats via repr, the shortest string that round-trips exactly.
    with open(path, "w") as fh:
        json.dump(network_to_dict(net, meta), fh)


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    with open(path) as fh:
        obj = json.load(fh)
    return network_from_dict(obj), obj.get("meta", {})
