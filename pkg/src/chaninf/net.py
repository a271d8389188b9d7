"""Fully connected scalar-output networks, MSE loss, exact gradient and Hessian.

Parameter vector layout (``NetworkParams.flatten``): layer by layer from the
input side, each layer contributing its weight matrix in row-major order
followed by its bias vector (if the network has biases). The output layer is
linear. For a one-hidden-layer net without biases this is exactly
``(w_1, ..., w_r, a_1, ..., a_r)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .activations import Activation, get_activation

HESSIAN_CAP = 2000
FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a gradient evaluation produces inf/nan."""

    def __init__(self, msg: str, index: int | None = None):
        super().__init__(msg)
        self.index = index


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    augmented: bool = False

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if self.inputs.shape[0] == 0:
            raise ValueError("empty dataset")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"inputs have {self.inputs.shape[0]} rows but {self.targets.shape[0]} targets"
            )
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite inputs")

    @classmethod
    def with_constant_input(cls, inputs, targets) -> "Dataset":
        """Append the constant coordinate ``x_{d+1} = 1`` to every input."""
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        X = np.hstack([X, np.ones((X.shape[0], 1))])
        return cls(X, targets, augmented=True)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass
class NetworkParams:
    """Weights ``W_l`` of shape ``(r_l, r_{l-1})`` and optional biases.

    The last entry of ``weights`` is the linear output layer of shape ``(1, r_L)``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray] | None = None
    activation: str = "softplus"
    _act: Activation = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.weights = [np.atleast_2d(np.asarray(W, dtype=float)) for W in self.weights]
        if self.biases is not None:
            self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
            if len(self.biases) != len(self.weights):
                raise ValueError("need one bias vector per layer")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} expects {self.weights[i].shape[1]} inputs, "
                                 f"previous layer has {self.weights[i - 1].shape[0]} units")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must be scalar")
        self._act = get_activation(self.activation)
        self.activation = self._act.name

    # -- construction -----------------------------------------------------
    @classmethod
    def single_layer(cls, w, a, b=None, c=None, activation="softplus") -> "NetworkParams":
        """One hidden layer: rows of ``w`` are input weights, ``a`` output weights."""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        a = np.asarray(a, dtype=float).reshape(1, -1)
        if b is None and c is None:
            return cls([w, a], None, activation)
        b = np.zeros(w.shape[0]) if b is None else b
        c = 0.0 if c is None else c
        return cls([w, a], [b, np.atleast_1d(c)], activation)

    @classmethod
    def from_flat(cls, theta, widths: Sequence[int], activation="softplus", has_bias=False):
        theta = np.asarray(theta, dtype=float)
        if theta.size != n_params(widths, has_bias):
            raise ValueError(f"theta has {theta.size} entries, architecture needs "
                             f"{n_params(widths, has_bias)}")
        weights, biases, k = [], [], 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(theta[k:k + fan_in * fan_out].reshape(fan_out, fan_in).copy())
            k += fan_in * fan_out
            if has_bias:
                biases.append(theta[k:k + fan_out].copy())
                k += fan_out
        return cls(weights, biases if has_bias else None, activation)

    # -- views ------------------------------------------------------------
    @property
    def act(self) -> Activation:
        return self._act

    @property
    def has_bias(self) -> bool:
        return self.biases is not None

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.weights) - 1

    @property
    def n_params(self) -> int:
        return n_params(self.widths, self.has_bias)

    @property
    def w(self) -> np.ndarray:
        """Input weights of the first hidden layer, one row per neuron."""
        return self.weights[0]

    @property
    def a(self) -> np.ndarray:
        """Output weights (single hidden layer nets)."""
        return self.weights[-1][0]

    @property
    def b(self) -> np.ndarray | None:
        return None if self.biases is None else self.biases[0]

    def flatten(self) -> np.ndarray:
        parts = []
        for i, W in enumerate(self.weights):
            parts.append(W.ravel())
            if self.biases is not None:
                parts.append(self.biases[i])
        return np.concatenate(parts)

    def with_theta(self, theta) -> "NetworkParams":
        return NetworkParams.from_flat(theta, self.widths, self.activation, self.has_bias)

    def copy(self) -> "NetworkParams":
        return self.with_theta(self.flatten())

    def param_index(self, layer: int, kind: str, row: int, col: int = 0) -> int:
        """Flat index of ``W_layer[row, col]`` (kind='w') or ``b_layer[row]`` (kind='b')."""
        widths = self.widths
        k = 0
        for l in range(layer):
            k += widths[l] * widths[l + 1] + (widths[l + 1] if self.has_bias else 0)
        fan_in = widths[layer]
        if kind == "w":
            return k + row * fan_in + col
        if kind == "b":
            if not self.has_bias:
                raise ValueError("network has no biases")
            return k + fan_in * widths[layer + 1] + row
        raise ValueError(kind)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "widths": self.widths,
            "activation": self.activation,
            "has_bias": self.has_bias,
            "theta": self.flatten().tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {d.get('version')}")
        return cls.from_flat(d["theta"], d["widths"], d["activation"], d["has_bias"])

    @classmethod
    def from_json(cls, s: str) -> "NetworkParams":
        return cls.from_dict(json.loads(s))


def n_params(widths: Sequence[int], has_bias: bool) -> int:
    return sum(i * o + (o if has_bias else 0) for i, o in zip(widths[:-1], widths[1:]))


def _forward_cache(net: NetworkParams, X: np.ndarray):
    if X.shape[1] != net.widths[0]:
        raise ValueError(f"input dimension {X.shape[1]} != network input width {net.widths[0]}")
    hs, zs = [X], []
    h = X
    for l, W in enumerate(net.weights[:-1]):
        z = h @ W.T
        if net.biases is not None:
            z = z + net.biases[l]
        zs.append(z)
        h = net.act.value(z)
        hs.append(h)
    out = h @ net.weights[-1][0]
    if net.biases is not None:
        out = out + net.biases[-1][0]
    return out, hs, zs


def forward(net: NetworkParams, x) -> np.ndarray | float:
    """Network output; a scalar for one input vector, an ``(N,)`` array for a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out, _, _ = _forward_cache(net, np.atleast_2d(x))
    return float(out[0]) if single else out


def residuals(net: NetworkParams, data: Dataset) -> np.ndarray:
    """``f(x_i) - y_i`` for every sample."""
    return forward(net, data.inputs) - data.targets


def mse_loss(net: NetworkParams, data: Dataset) -> float:
    """``(1/N) sum_i (y_i - f(x_i))^2``.

    The population loss in :mod:`chaninf.analytic` carries an extra factor 1/2.
    """
    e = residuals(net, data)
    return float(np.mean(e * e))


def loss_and_gradient(net: NetworkParams, data: Dataset) -> tuple[float, np.ndarray]:
    return _loss_and_gradient_xy(net, data.inputs, data.targets)


def _loss_and_gradient_xy(net: NetworkParams, X: np.ndarray, y: np.ndarray):
    out, hs, zs = _forward_cache(net, X)
    e = out - y
    loss = float(np.mean(e * e))
    delta = (2.0 / X.shape[0]) * e  # dL/df per sample, (N,)

    grads_w: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    grads_w[-1] = (delta @ hs[-1])[None, :]
    grads_b[-1] = np.array([delta.sum()])
    back = np.outer(delta, net.weights[-1][0])  # dL/dh_L, (N, r_L)
    for l in range(len(net.weights) - 2, -1, -1):
        dz = back * net.act.d1(zs[l])
        grads_w[l] = dz.T @ hs[l]
        grads_b[l] = dz.sum(axis=0)
        if l > 0:
            back = dz @ net.weights[l]

    parts = []
    for l in range(len(net.weights)):
        parts.append(grads_w[l].ravel())
        if net.has_bias:
            parts.append(grads_b[l])
    g = np.concatenate(parts)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        idx = int(bad[0]) if bad.size else None
        raise NonFiniteError(f"non-finite gradient (first bad parameter index {idx})", idx)
    return loss, g


def loss_gradient(net: NetworkParams, data: Dataset) -> np.ndarray:
    return loss_and_gradient(net, data)[1]


def _single_layer_hessian(net: NetworkParams, data: Dataset) -> np.ndarray:
    X = data.inputs
    N, d = X.shape
    W, a = net.w, net.a
    r = W.shape[0]
    bias = net.has_bias
    Xt = np.hstack([X, np.ones((N, 1))]) if bias else X

    z = X @ W.T + (net.b if bias else 0.0)
    s0, s1, s2 = net.act.value(z), net.act.d1(z), net.act.d2(z)
    e = s0 @ a + (net.biases[-1][0] if bias else 0.0) - data.targets

    # index maps into the flat vector
    def in_idx(j):
        wi = list(range(j * d, (j + 1) * d))
        return wi + ([r * d + j] if bias else [])

    a0 = r * d + (r if bias else 0)
    P = net.n_params
    J = np.zeros((N, P))
    for j in range(r):
        J[:, in_idx(j)] = (a[j] * s1[:, j])[:, None] * Xt
    J[:, a0:a0 + r] = s0
    if bias:
        J[:, -1] = 1.0

    H = J.T @ J
    for j in range(r):
        idx = in_idx(j)
        blk = (Xt * (e * a[j] * s2[:, j])[:, None]).T @ Xt
        H[np.ix_(idx, idx)] += blk
        cross = (e * s1[:, j]) @ Xt
        H[idx, a0 + j] += cross
        H[a0 + j, idx] += cross
    return (2.0 / N) * H


def loss_hessian(net: NetworkParams, data: Dataset, cap: int = HESSIAN_CAP,
                 fd_step: float = 1e-5) -> np.ndarray:
    """Exact Hessian for one hidden layer; central differences of the gradient otherwise."""
    P = net.n_params
    if P > cap:
        raise ValueError(f"Hessian of {P} parameters exceeds cap {cap}")
    if net.depth == 1:
        H = _single_layer_hessian(net, data)
        return 0.5 * (H + H.T)
    theta = net.flatten()
    H = np.empty((P, P))
    for k in range(P):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += fd_step
        tm[k] -= fd_step
        H[:, k] = (loss_gradient(net.with_theta(tp), data)
                   - loss_gradient(net.with_theta(tm), data)) / (2 * fd_step)
    return 0.5 * (H + H.T)


class LossFunction:
    """Loss/gradient closure over a fixed architecture and dataset, acting on flat vectors."""

    def __init__(self, template: NetworkParams, data: Dataset):
        self.template = template
        self.data = data

    def net(self, theta) -> NetworkParams:
        return self.template.with_theta(theta)

    def loss(self, theta) -> float:
        return mse_loss(self.net(theta), self.data)

    def loss_and_grad(self, theta) -> tuple[float, np.ndarray]:
        return loss_and_gradient(self.net(theta), self.data)

    def grad(self, theta) -> np.ndarray:
        return self.loss_and_grad(theta)[1]

    def hessian(self, theta) -> np.ndarray:
        return loss_hessian(self.net(theta), self.data)
