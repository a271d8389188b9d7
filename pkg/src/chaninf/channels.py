"""Neuron-pair reparameterisation, the gated-linear-unit limit and channel diagnostics.

Input weight vectors here are "extended": when a network has biases, the bias
is appended as the last coordinate and paired with a constant input of 1.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .activations import get_activation
from .flow import FlowConfig, FlowResult, integrate_gradient_flow
from .net import Dataset, NetworkParams, mse_loss


# -- extended input weights -------------------------------------------------

def extended_weights(net: NetworkParams, layer: int = 0) -> np.ndarray:
    W = net.weights[layer]
    if net.has_bias:
        W = np.hstack([W, net.biases[layer][:, None]])
    return W


def extended_inputs(net: NetworkParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.hstack([X, np.ones((X.shape[0], 1))]) if net.has_bias else X


def _set_neuron(net: NetworkParams, j: int, w_ext: np.ndarray, a: float) -> None:
    d = net.weights[0].shape[1]
    net.weights[0][j] = w_ext[:d]
    if net.has_bias:
        net.biases[0][j] = w_ext[d]
    net.weights[1][0, j] = a


def _require_single_layer(net: NetworkParams):
    if net.depth != 1:
        raise ValueError("operation implemented for one hidden layer")


# -- reparameterisation -----------------------------------------------------

@dataclass
class PairReparam:
    w: np.ndarray
    eps: float
    delta: np.ndarray | None
    a: float
    c: float
    source: tuple[int, int] = (0, 1)

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "eps": self.eps,
                "delta": None if self.delta is None else self.delta.tolist(),
                "a": self.a, "c": self.c, "source": list(self.source)}


def reparam_pair(a_i: float, a_j: float, w_i, w_j, source=(0, 1)) -> PairReparam:
    w_i = np.asarray(w_i, dtype=float)
    w_j = np.asarray(w_j, dtype=float)
    diff = w_i - w_j
    nrm = float(np.linalg.norm(diff))
    eps = nrm / 2.0
    delta = diff / nrm if nrm > 0 else None
    return PairReparam(w=(w_i + w_j) / 2.0, eps=eps, delta=delta, a=eps * (a_i - a_j),
                       c=a_i + a_j, source=tuple(source))


def inverse_reparam(p: PairReparam):
    """``(a_i, a_j, w_i, w_j)`` from the pair coordinates; needs ``eps > 0``."""
    if not p.eps > 0 or p.delta is None:
        raise ValueError("inverse reparameterisation undefined at eps = 0")
    half = p.a / p.eps
    return (p.c + half) / 2.0, (p.c - half) / 2.0, p.w + p.eps * p.delta, p.w - p.eps * p.delta


def pair_output(p: PairReparam, X, activation) -> np.ndarray:
    """Mean and central-difference form of the pair contribution ``a_i s(w_i.x) + a_j s(w_j.x)``."""
    act = get_activation(activation)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    zp = X @ (p.w + p.eps * p.delta)
    zm = X @ (p.w - p.eps * p.delta)
    sp, sm = act.value(zp), act.value(zm)
    return 0.5 * p.c * (sp + sm) + p.a / (2.0 * p.eps) * (sp - sm)


def glu_limit_output(c: float, a: float, w, delta, X, activation) -> np.ndarray:
    """``c s(w.x) + a (delta.x) s'(w.x)``."""
    act = get_activation(activation)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = X @ np.asarray(w, dtype=float)
    return c * act.value(z) + a * (X @ np.asarray(delta, dtype=float)) * act.d1(z)


def glu_correction(c: float, a: float, w, delta, X, activation) -> np.ndarray:
    """Coefficient of eps^2 in the pair output: ``c/2 (D.x)^2 s'' + a/6 (D.x)^3 s'''``."""
    act = get_activation(activation)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = X @ np.asarray(w, dtype=float)
    u = X @ np.asarray(delta, dtype=float)
    return 0.5 * c * u**2 * act.d2(z) + a / 6.0 * u**3 * act.d3(z)


def net_pair_reparam(net: NetworkParams, pair: tuple[int, int]) -> PairReparam:
    _require_single_layer(net)
    i, j = pair
    W = extended_weights(net)
    return reparam_pair(net.a[i], net.a[j], W[i], W[j], source=(i, j))


def set_pair(net: NetworkParams, p: PairReparam) -> NetworkParams:
    """Copy of ``net`` with the pair ``p.source`` set from pair coordinates."""
    _require_single_layer(net)
    out = net.copy()
    a_i, a_j, w_i, w_j = inverse_reparam(p)
    i, j = p.source
    _set_neuron(out, i, w_i, a_i)
    _set_neuron(out, j, w_j, a_j)
    return out


def _rest_output(net: NetworkParams, X: np.ndarray, pair) -> np.ndarray:
    """Network output without the contributions of the two neurons in ``pair``."""
    Xe = extended_inputs(net, X)
    S = net.act.value(Xe @ extended_weights(net).T)
    mask = np.ones(net.a.size, dtype=bool)
    mask[list(pair)] = False
    out = S[:, mask] @ net.a[mask]
    if net.has_bias:
        out = out + net.biases[-1][0]
    return out


def glu_error(net: NetworkParams, data: Dataset, pair) -> float:
    """RMS over the training inputs of ``|pair output - GLU limit output|``."""
    p = net_pair_reparam(net, pair)
    Xe = extended_inputs(net, data.inputs)
    diff = pair_output(p, Xe, net.act) - glu_limit_output(p.c, p.a, p.w, p.delta, Xe, net.act)
    return float(np.sqrt(np.mean(diff**2)))


# -- loss expansion in eps --------------------------------------------------

@dataclass
class ExpansionCheck:
    exponent: float
    h: float
    loss0: float
    eps: np.ndarray
    losses: np.ndarray
    ratios: np.ndarray  # (L(eps) - L(0)) / eps^2


def limit_loss_and_h_data(net: NetworkParams, data: Dataset, pair, c, a, w, delta):
    """Loss with the pair replaced by its eps -> 0 limit, and the eps^2 coefficient ``h``."""
    Xe = extended_inputs(net, data.inputs)
    f0 = _rest_output(net, data.inputs, pair) + glu_limit_output(c, a, w, delta, Xe, net.act)
    e0 = f0 - data.targets
    f2 = glu_correction(c, a, w, delta, Xe, net.act)
    return float(np.mean(e0**2)), float(np.mean(f2 * 2.0 * e0))


def eps_expansion_check(net: NetworkParams, data: Dataset, pair, eps_list,
                        c=None, a=None, w=None, delta=None) -> ExpansionCheck:
    """Compare ``L(theta(eps)) - L(theta_0)`` with ``eps^2 h(theta_0)``.

    Pair coordinates default to those of ``pair`` in ``net``; all other
    parameters stay as in ``net``.
    """
    _require_single_layer(net)
    eps_list = np.asarray(eps_list, dtype=float)
    if np.any(eps_list <= 0) or np.any(np.diff(eps_list) >= 0):
        raise ValueError("eps_list must be positive and decreasing")
    p0 = net_pair_reparam(net, pair)
    c = p0.c if c is None else c
    a = p0.a if a is None else a
    w = p0.w if w is None else np.asarray(w, dtype=float)
    delta = p0.delta if delta is None else np.asarray(delta, dtype=float)
    loss0, h = limit_loss_and_h_data(net, data, pair, c, a, w, delta)
    losses = np.array([
        mse_loss(set_pair(net, PairReparam(w, e, delta, a, c, tuple(pair))), data) for e in eps_list
    ])
    dl = losses - loss0
    if np.all(dl < 0):
        warnings.warn("loss below its eps=0 limit for every eps (h < 0)", RuntimeWarning,
                      stacklevel=2)
    ok = np.abs(dl) > 0
    exponent = float(np.polyfit(np.log(eps_list[ok]), np.log(np.abs(dl[ok])), 1)[0]) \
        if ok.sum() >= 2 else float("nan")
    return ExpansionCheck(exponent, h, loss0, eps_list, losses, dl / eps_list**2)


# -- channel detection ------------------------------------------------------

def cosine_distance_matrix(W: np.ndarray, odd: bool = False) -> np.ndarray:
    nrm = np.linalg.norm(W, axis=1)
    nrm = np.where(nrm == 0, 1.0, nrm)
    C = (W @ W.T) / np.outer(nrm, nrm)
    if odd:
        C = np.abs(C)
    D = 1.0 - np.clip(C, -1.0, 1.0)
    np.fill_diagonal(D, np.inf)
    return D


@dataclass
class ChannelGroup:
    layer: int
    members: list[int]
    min_cosdist: float
    sum_abs_a: float


@dataclass
class ChannelReport:
    is_channel: bool
    param_norm: float
    min_cosdist: float
    closest_pair: tuple[int, int, int]  # (layer, i, j)
    closest_sum_abs_a: float
    groups: list[ChannelGroup] = field(default_factory=list)
    parallel_fraction: np.ndarray | None = None
    slope_exponent: float | None = None
    norm_threshold: float = 1e3
    cos_threshold: float = 0.01

    @property
    def group_sizes(self) -> list[int]:
        return [len(g.members) for g in self.groups]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["closest_pair"] = list(self.closest_pair)
        d["parallel_fraction"] = (None if self.parallel_fraction is None
                                  else np.asarray(self.parallel_fraction).tolist())
        d["min_cosdist"] = float(self.min_cosdist)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _outgoing_abs(net: NetworkParams, layer: int, j: int) -> float:
    return float(np.linalg.norm(net.weights[layer + 1][:, j]))


def _single_linkage(D: np.ndarray, thr: float) -> list[list[int]]:
    n = D.shape[0]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if D[i, j] < thr:
                parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted((g for g in groups.values() if len(g) > 1), key=lambda g: g[0])


def detect_channels(result: FlowResult | NetworkParams, norm_threshold: float = 1e3,
                    cos_threshold: float = 0.01, param_norm: float | None = None) -> ChannelReport:
    """Classify a finished run as channel / not channel and group merging neurons."""
    net = result.net() if isinstance(result, FlowResult) else result
    if param_norm is None:
        param_norm = float(np.linalg.norm(net.flatten()))
    best = (np.inf, (0, 0, 1))
    groups = []
    for layer in range(net.depth):
        W = extended_weights(net, layer)
        if W.shape[0] < 2:
            continue
        D = cosine_distance_matrix(W, odd=net.act.odd)
        # argmin over the upper triangle in row-major order: lexicographically smallest tie
        iu = np.triu_indices(W.shape[0], 1)
        k = int(np.argmin(D[iu]))
        if D[iu][k] < best[0]:
            best = (float(D[iu][k]), (layer, int(iu[0][k]), int(iu[1][k])))
        for members in _single_linkage(D, cos_threshold):
            sub = D[np.ix_(members, members)]
            groups.append(ChannelGroup(layer, members, float(np.min(sub)),
                                       sum(_outgoing_abs(net, layer, j) for j in members)))
    min_cd, (layer, i, j) = best
    sum_abs = (_outgoing_abs(net, layer, i) + _outgoing_abs(net, layer, j)
               if np.isfinite(min_cd) else 0.0)
    return ChannelReport(
        is_channel=bool(param_norm > norm_threshold and min_cd < cos_threshold),
        param_norm=param_norm, min_cosdist=min_cd, closest_pair=(layer, i, j),
        closest_sum_abs_a=sum_abs, groups=groups,
        norm_threshold=norm_threshold, cos_threshold=cos_threshold,
    )


def _out_index(net: NetworkParams, layer: int, row: int, j: int) -> int:
    return net.param_index(layer + 1, "w", row, j)


def group_directions(net: NetworkParams, groups) -> np.ndarray:
    """Orthonormal basis of the saddle-line subspace spanned by the groups.

    A group of k neurons contributes the k-1 antisymmetric outgoing-weight
    directions (first member minus each other member).
    """
    P = net.n_params
    vecs = []
    for g in groups:
        layer, members = (g.layer, g.members) if isinstance(g, ChannelGroup) else g
        out = net.weights[layer + 1]
        for m in members[1:]:
            v = np.zeros(P)
            diff = out[:, members[0]] - out[:, m]
            col = diff / np.linalg.norm(diff) if np.linalg.norm(diff) > 0 else np.ones(out.shape[0])
            for row in range(out.shape[0]):
                v[_out_index(net, layer, row, members[0])] = col[row]
                v[_out_index(net, layer, row, m)] = -col[row]
            vecs.append(v)
    if not vecs:
        return np.zeros((P, 0))
    Q, _ = np.linalg.qr(np.array(vecs).T)
    return Q


def parallel_update_fraction(result: FlowResult, directions) -> np.ndarray:
    """``|projection of dtheta onto the line subspace| / |dtheta|`` per recorded update.

    ``directions`` is a SaddleLine, a ChannelReport (its groups), or an array
    whose columns span the subspace.
    """
    from .landscape import SaddleLine

    if isinstance(directions, SaddleLine):
        Q = directions.direction[:, None]
    elif isinstance(directions, ChannelReport):
        Q = group_directions(result.net(), directions.groups)
    else:
        Q = np.asarray(directions, dtype=float)
        if Q.ndim == 1:
            Q = Q[:, None]
        Q, _ = np.linalg.qr(Q)
    out = []
    for _, dtheta in result.updates:
        n = np.linalg.norm(dtheta)
        if n == 0:
            continue
        out.append(np.linalg.norm(Q.T @ dtheta) / n)
    return np.array(out)


# -- jump procedure ---------------------------------------------------------

@dataclass
class JumpRecord:
    eps: float
    loss: float
    c: float
    a: float
    w: np.ndarray
    delta: np.ndarray
    glu_error: float
    a_diff: float  # a_i - a_j

    @property
    def cos_delta_w(self) -> float:
        return float(self.delta @ self.w / (np.linalg.norm(self.delta) * np.linalg.norm(self.w)))

    def to_dict(self) -> dict:
        return {"eps": self.eps, "loss": self.loss, "c": self.c, "a": self.a,
                "w": self.w.tolist(), "delta": self.delta.tolist(),
                "glu_error": self.glu_error, "a_diff": self.a_diff,
                "cos_delta_w": self.cos_delta_w}


@dataclass
class JumpResult:
    records: list[JumpRecord]
    net: NetworkParams
    stop_reason: str = "completed"

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_json(self) -> str:
        return json.dumps({"stop_reason": self.stop_reason,
                           "records": [r.to_dict() for r in self.records],
                           "network": self.net.to_dict()})


def _jump_record(net: NetworkParams, data: Dataset, pair) -> JumpRecord:
    p = net_pair_reparam(net, pair)
    i, j = pair
    return JumpRecord(p.eps, mse_loss(net, data), p.c, p.a, p.w, p.delta,
                      glu_error(net, data, pair), float(net.a[i] - net.a[j]))


def jump_procedure(net: NetworkParams, data: Dataset, pair, halvings: int = 10,
                   flow_cfg: FlowConfig | None = None, factor: float = 2.0) -> JumpResult:
    """Alternate ``eps -> eps / factor`` (other pair coordinates fixed) with short flow relaxation."""
    _require_single_layer(net)
    cfg = flow_cfg or FlowConfig(max_steps=200, grad_tol=1e-12, maxnorm=1e12)
    records = [_jump_record(net, data, pair)]
    cur = net
    for _ in range(halvings):
        p = net_pair_reparam(cur, pair)
        p.eps /= factor
        jumped = set_pair(cur, p)
        res = integrate_gradient_flow(jumped, data, cfg)
        if res.stop_reason == "nonfinite" or not np.all(np.isfinite(res.theta)):
            return JumpResult(records, cur, "diverged")
        cur = res.net()
        records.append(_jump_record(cur, data, pair))
    return JumpResult(records, cur)


# -- slope law --------------------------------------------------------------

def slope_law_fit(eps, loss, a_diff, min_decades: float = 0.5) -> float:
    """Exponent of ``|dL / d(a_i - a_j)|`` against ``eps`` along a channel series.

    Derivatives are finite differences between consecutive points, placed at
    the geometric mean of their ``eps``.
    """
    eps = np.asarray(eps, dtype=float)
    loss = np.asarray(loss, dtype=float)
    a_diff = np.asarray(a_diff, dtype=float)
    if len(np.unique(eps)) < 4:
        raise ValueError("need at least 4 points with distinct eps")
    if np.log10(eps.max() / eps.min()) < min_decades:
        raise ValueError(f"eps spans less than {min_decades} decades")
    dL = np.diff(loss)
    du = np.diff(a_diff)
    ok = (np.abs(dL) > 0) & (np.abs(du) > 0)
    if ok.sum() < 3:
        raise ValueError("degenerate series: loss does not change along the channel")
    slope = np.abs(dL[ok] / du[ok])
    mid = np.sqrt(eps[:-1] * eps[1:])[ok]
    return float(np.polyfit(np.log(mid), np.log(slope), 1)[0])


def loss_eps2_fit(eps, loss) -> tuple[float, float]:
    """Log-log slope of ``L - L_inf`` against ``eps^2``; ``L_inf`` by Richardson from the last two points."""
    eps = np.asarray(eps, dtype=float)
    loss = np.asarray(loss, dtype=float)
    r = (eps[-2] / eps[-1]) ** 2
    l_inf = (r * loss[-1] - loss[-2]) / (r - 1.0)
    dl = loss[:-1] - l_inf
    ok = dl > 0
    if ok.sum() < 2:
        raise ValueError("loss does not approach a limit from above")
    slope = float(np.polyfit(np.log(eps[:-1][ok] ** 2), np.log(dl[ok]), 1)[0])
    return slope, float(l_inf)


# -- merging ----------------------------------------------------------------

def merge_channel_pair(net: NetworkParams, pair, layer: int = 0) -> NetworkParams:
    """Replace neurons ``i, j`` by one with averaged incoming and summed outgoing weights."""
    i, j = sorted(pair)
    weights = [W.copy() for W in net.weights]
    biases = None if net.biases is None else [b.copy() for b in net.biases]
    weights[layer][i] = 0.5 * (weights[layer][i] + weights[layer][j])
    weights[layer] = np.delete(weights[layer], j, axis=0)
    if biases is not None:
        biases[layer][i] = 0.5 * (biases[layer][i] + biases[layer][j])
        biases[layer] = np.delete(biases[layer], j)
    out = weights[layer + 1]
    out[:, i] = out[:, i] + out[:, j]
    weights[layer + 1] = np.delete(out, j, axis=1)
    return NetworkParams(weights, biases, net.activation)


# -- three-neuron hierarchy -------------------------------------------------

THREE_NEURON_BASIS = np.array([
    np.ones(3) / np.sqrt(3.0),
    np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0),
    np.array([1.0, -2.0, 1.0]) / np.sqrt(6.0),
])
SECOND_ORDER_COEF = 0.5 * float(THREE_NEURON_BASIS[2] @ THREE_NEURON_BASIS[1] ** 2)


def multi_neuron_limit_output(alpha, omega, X, activation) -> np.ndarray:
    """eps -> 0 output of the three-neuron construction with readouts ``alpha`` and inputs ``omega``.

    ``sqrt3 a0 s(o0.x/sqrt3) + [a1 o1.x + a2 o2.x] s'(o0.x/sqrt3) + k a2 (o1.x)^2 s''(o0.x/sqrt3)``
    with ``k = sum_i u2_i u1_i^2 / 2 = 1 / (2 sqrt6)``.
    """
    act = get_activation(activation)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    a0, a1, a2 = alpha
    o0, o1, o2 = (X @ np.asarray(o, dtype=float) for o in omega)
    z = o0 / np.sqrt(3.0)
    return (np.sqrt(3.0) * a0 * act.value(z) + (a1 * o1 + a2 * o2) * act.d1(z)
            + SECOND_ORDER_COEF * a2 * o1**2 * act.d2(z))


def three_neuron_network(alpha, omega, eps: float, activation) -> NetworkParams:
    """Finite-eps network with ``W^T u_k = eps^k omega_k`` and ``<u_k, a> = eps^-k alpha_k``."""
    U = THREE_NEURON_BASIS
    omega = np.asarray(omega, dtype=float)
    W = sum(np.outer(U[k], eps**k * omega[k]) for k in range(3))
    a = sum(U[k] * eps ** (-k) * alpha[k] for k in range(3))
    return NetworkParams.single_layer(W, a, activation=get_activation(activation).name)
