"""Neuron duplication, saddle lines, Hessian eigenanalysis and plateau-saddle tests."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .net import Dataset, NetworkParams, loss_gradient, loss_hessian, residuals


class DegenerateEigenWarning(UserWarning):
    pass


# -- duplication ------------------------------------------------------------

def duplicate_neuron(net: NetworkParams, neuron_idx: int, gamma: float,
                     layer: int = 0) -> NetworkParams:
    """Split hidden neuron ``neuron_idx`` of hidden layer ``layer`` into two copies.

    Both copies keep the incoming weights (and bias). The original slot keeps
    ``gamma`` times the outgoing weights, the copy, appended as the last neuron
    of the layer, gets ``1 - gamma`` times them. The network function is unchanged.
    """
    if not 0 <= layer < net.depth:
        raise ValueError(f"layer {layer} is not a hidden layer (network has {net.depth})")
    r = net.weights[layer].shape[0]
    if not 0 <= neuron_idx < r:
        raise ValueError(f"neuron {neuron_idx} out of range for layer of width {r}")
    weights = [W.copy() for W in net.weights]
    biases = None if net.biases is None else [b.copy() for b in net.biases]

    weights[layer] = np.vstack([weights[layer], weights[layer][neuron_idx]])
    if biases is not None:
        biases[layer] = np.append(biases[layer], biases[layer][neuron_idx])
    out = weights[layer + 1]
    col = out[:, neuron_idx].copy()
    out = np.hstack([out, ((1.0 - gamma) * col)[:, None]])
    out[:, neuron_idx] = gamma * col
    weights[layer + 1] = out
    return NetworkParams(weights, biases, net.activation)


@dataclass
class SaddleLine:
    """The line of critical points obtained by duplicating one neuron of ``base``."""

    base: NetworkParams
    neuron_idx: int
    layer: int = 0
    a_star: np.ndarray = field(init=False)
    direction: np.ndarray = field(init=False)

    def __post_init__(self):
        self.a_star = self.base.weights[self.layer + 1][:, self.neuron_idx].copy()
        if self.a_star.size == 1:
            self.a_star = self.a_star.reshape(1)
        self.direction = line_direction(self.base, self.neuron_idx, self.layer)

    def at(self, gamma: float) -> NetworkParams:
        return duplicate_neuron(self.base, self.neuron_idx, gamma, self.layer)

    def theta(self, gamma: float) -> np.ndarray:
        return self.at(gamma).flatten()

    @property
    def pair(self) -> tuple[int, int]:
        """Indices of the two copies in the duplicated layer."""
        return self.neuron_idx, self.base.weights[self.layer].shape[0]

    def projected_gamma(self, net: NetworkParams) -> float:
        i, j = self.pair
        out = net.weights[self.layer + 1]
        # deep nets: read gamma off the outgoing weight with the largest original magnitude
        k = int(np.argmax(np.abs(self.a_star)))
        return projected_gamma(out[k, i], out[k, j], self.a_star[k])

    def distance(self, theta) -> float:
        """Euclidean distance from ``theta`` to the line."""
        p0 = self.theta(0.0)
        d = np.asarray(theta) - p0
        return float(np.linalg.norm(d - (d @ self.direction) * self.direction))


def line_direction(base: NetworkParams, neuron_idx: int, layer: int = 0) -> np.ndarray:
    """Unit vector along the saddle line, in the duplicated network's flat coordinates."""
    dup0 = duplicate_neuron(base, neuron_idx, 0.0, layer)
    dup1 = duplicate_neuron(base, neuron_idx, 1.0, layer)
    v = dup1.flatten() - dup0.flatten()
    return v / np.linalg.norm(v)


def projected_gamma(a_r: float, a_r1: float, a_star: float) -> float:
    if a_star == 0:
        raise ZeroDivisionError("projected gamma undefined for a zero original output weight")
    return (a_r - a_r1 + a_star) / (2.0 * a_star)


# -- symmetric eigenproblem -------------------------------------------------

def _round_robin(n: int) -> list[list[tuple[int, int]]]:
    """Pairings for the parallel-ordering Jacobi sweep (circle method)."""
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for k in range(m // 2):
            p, q = idx[k], idx[m - 1 - k]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def symmetric_eigen(H, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition; eigenvalues ascending with orthonormal vectors.

    Each sweep applies the n-1 rounds of a round-robin ordering, where every
    round rotates n/2 disjoint index pairs at once.
    """
    A = np.array(H, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    n = A.shape[0]
    scale = np.linalg.norm(A)
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10 * max(scale, 1.0):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n < 2 or scale == 0:
        return np.diag(A).copy(), V
    rounds = [(np.array([p for p, _ in r]), np.array([q for _, q in r])) for r in _round_robin(n)]
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off < tol * scale:
            break
        for p, q in rounds:
            apq = A[p, q]
            app, aqq = A[p, p], A[q, q]
            nz = np.abs(apq) > 1e-300
            theta = np.where(nz, (aqq - app) / (2.0 * np.where(nz, apq, 1.0)), 0.0)
            t = np.where(nz, np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            t = np.where(nz & (theta == 0), 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
    evals = np.diag(A).copy()
    order = np.argsort(evals, kind="stable")
    return evals[order], V[:, order]


def _fix_sign(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v)))
    return v if v[k] >= 0 else -v


def min_eigvec(H) -> tuple[float, np.ndarray, float]:
    """Smallest eigenvalue, its unit eigenvector (largest entry positive) and the gap to the next."""
    evals, V = symmetric_eigen(H)
    gap = float(evals[1] - evals[0]) if len(evals) > 1 else np.inf
    return float(evals[0]), _fix_sign(V[:, 0]), gap


def perturb_along_eigvec(line: SaddleLine, data: Dataset, gamma: float, alpha: float,
                         sign: int = 1) -> NetworkParams:
    """``theta^gamma + sign * alpha * e_min`` with ``e_min`` the lowest Hessian eigenvector."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    net = line.at(gamma)
    if alpha == 0:
        return net
    lam, e, gap = min_eigvec(loss_hessian(net, data))
    if gap < 1e-12:
        warnings.warn(f"smallest Hessian eigenvalue at gamma={gamma} is degenerate (gap {gap:.2e})",
                      DegenerateEigenWarning, stacklevel=2)
    return net.with_theta(net.flatten() + np.sign(sign) * alpha * e)


# -- eigenvalue tracking ----------------------------------------------------

@dataclass
class EigenTrack:
    gammas: np.ndarray
    sorted_eigs: np.ndarray  # (G, P) ascending per grid point
    curves: np.ndarray  # (G, P) eigenvalue of curve k at grid point g
    perms: np.ndarray  # (G, P): curves[g, k] = sorted_eigs[g, perms[g, k]]
    overlaps: np.ndarray  # (G, P) |<v_k(g-1), v_k(g)>|, first row = 1
    angles: np.ndarray  # (G, P) rotation from the reference grid point, radians
    ref_index: int
    flagged: list[int] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gamma", "curve_id", "eigenvalue", "rotation_angle"])
            for g, gamma in enumerate(self.gammas):
                for k in range(self.curves.shape[1]):
                    w.writerow([repr(float(gamma)), k, repr(float(self.curves[g, k])),
                                repr(float(self.angles[g, k]))])


def match_eigenvectors(V_prev: np.ndarray, V_cur: np.ndarray, ambiguity: float = 1e-6):
    """Greedy maximum-|overlap| assignment of current eigenvectors to previous ones.

    Returns ``perm`` (previous index -> current index) and whether any choice
    was ambiguous (two candidate overlaps within ``ambiguity``).
    """
    O = np.abs(V_prev.T @ V_cur)
    n = O.shape[0]
    perm = -np.ones(n, dtype=int)
    rows, cols = set(range(n)), set(range(n))
    ambiguous = False
    work = O.copy()
    for _ in range(n):
        i, j = np.unravel_index(int(np.argmax(work)), work.shape)
        best = work[i, j]
        row = np.delete(work[i], j)
        row = row[row >= 0]
        if row.size and best - row.max() < ambiguity and best > ambiguity:
            ambiguous = True
        perm[i] = j
        rows.discard(i)
        cols.discard(j)
        work[i, :] = -1.0
        work[:, j] = -1.0
    return perm, ambiguous


def track_eigen_curves(hessians, gammas, ref_gamma: float = 0.5) -> EigenTrack:
    """Follow eigenvalue identities across a sorted ``gammas`` grid by eigenvector continuity.

    ``hessians`` is a sequence of symmetric matrices or a callable ``gamma -> H``.
    """
    gammas = np.asarray(gammas, dtype=float)
    if np.any(np.diff(gammas) <= 0):
        raise ValueError("gamma grid must be strictly increasing")
    if callable(hessians):
        hessians = [hessians(g) for g in gammas]
    G = len(gammas)
    decomp = [symmetric_eigen(H) for H in hessians]
    P = decomp[0][0].size
    sorted_eigs = np.array([d[0] for d in decomp])
    perms = np.zeros((G, P), dtype=int)
    perms[0] = np.arange(P)
    vecs = np.zeros((G, P, P))  # vecs[g][:, k] = vector of curve k
    vecs[0] = decomp[0][1]
    overlaps = np.ones((G, P))
    flagged = []
    for g in range(1, G):
        V = decomp[g][1]
        perm, ambiguous = match_eigenvectors(vecs[g - 1], V)
        cur = V[:, perm]
        dots = np.sum(vecs[g - 1] * cur, axis=0)
        cur = cur * np.where(dots < 0, -1.0, 1.0)
        vecs[g] = cur
        perms[g] = perm
        overlaps[g] = np.abs(dots)
        if ambiguous or np.any(overlaps[g] <= 1 / np.sqrt(2)):
            flagged.append(g)
    curves = np.take_along_axis(sorted_eigs, perms, axis=1)
    ref = int(np.argmin(np.abs(gammas - ref_gamma)))
    cosines = np.abs(np.einsum("gik,ik->gk", vecs, vecs[ref]))
    angles = np.arccos(np.clip(cosines, 0.0, 1.0))
    return EigenTrack(gammas, sorted_eigs, curves, perms, overlaps, angles, ref, flagged)


def track_line_eigen(line: SaddleLine, data: Dataset, gammas=None, ref_gamma: float = 0.5):
    gammas = np.linspace(-1.0, 2.0, 101) if gammas is None else gammas
    return track_eigen_curves(lambda g: loss_hessian(line.at(g), data), gammas, ref_gamma)


# -- plateau-saddle stability -----------------------------------------------

def fa_stability_matrix(net: NetworkParams, data: Dataset, neuron_idx: int,
                        crit_tol: float = 1e-7, rel_thresh: float = 1e-10):
    """Average of ``a_j sigma''(w_j.x) x x^T dl/df`` over the data and its definiteness.

    ``dl/df = 2 (f(x) - y)`` is the per-sample derivative of the squared error.
    ``x`` includes the constant coordinate when the network has biases.
    Returns ``(B, verdict)`` with verdict ``pos_def``, ``neg_def`` or ``indefinite``.
    """
    if net.depth != 1:
        raise ValueError("stability matrix implemented for one hidden layer")
    g = loss_gradient(net, data)
    if np.max(np.abs(g)) >= crit_tol:
        raise ValueError(f"base point is not critical (grad Linf {np.max(np.abs(g)):.2e})")
    X = data.inputs
    if net.has_bias:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    z = data.inputs @ net.w[neuron_idx] + (net.b[neuron_idx] if net.has_bias else 0.0)
    dldf = 2.0 * residuals(net, data)
    weights = net.a[neuron_idx] * net.act.d2(z) * dldf
    B = (X * weights[:, None]).T @ X / X.shape[0]
    B = 0.5 * (B + B.T)
    evals = np.linalg.eigvalsh(B)
    thr = rel_thresh * max(np.linalg.norm(B), 0.0)
    if np.linalg.norm(B) == 0:
        verdict = "indefinite"
    elif np.all(evals > thr):
        verdict = "pos_def"
    elif np.all(evals < -thr):
        verdict = "neg_def"
    else:
        verdict = "indefinite"
    return B, verdict


# -- solution identity ------------------------------------------------------

def canonicalize(net: NetworkParams) -> NetworkParams:
    """Permutation (and, for odd activations, sign) normal form of a one-hidden-layer net."""
    if net.depth != 1:
        raise ValueError("canonical form implemented for one hidden layer")
    W = net.w.copy()
    a = net.a.copy()
    b = None if net.b is None else net.b.copy()
    if net.act.odd:
        for j in range(W.shape[0]):
            nz = np.flatnonzero(W[j])
            if nz.size and W[j, nz[0]] < 0:
                W[j] *= -1
                a[j] *= -1
                if b is not None:
                    b[j] *= -1
    keys = [tuple(W[j]) + ((b[j],) if b is not None else ()) + (a[j],) for j in range(W.shape[0])]
    order = sorted(range(W.shape[0]), key=lambda j: keys[j])
    c = None if net.biases is None else net.biases[-1][0]
    return NetworkParams.single_layer(W[order], a[order], None if b is None else b[order], c,
                                      activation=net.activation)


def same_solution(n1: NetworkParams, n2: NetworkParams, tol: float = 1e-4) -> bool:
    if n1.widths != n2.widths or n1.has_bias != n2.has_bias:
        return False
    d = canonicalize(n1).flatten() - canonicalize(n2).flatten()
    return bool(np.max(np.abs(d)) < tol)


def count_unique(nets, tol: float = 1e-4) -> int:
    reps: list[NetworkParams] = []
    for n in nets:
        if not any(same_solution(n, r, tol) for r in reps):
            reps.append(n)
    return len(reps)


def duplicate_pairs(net: NetworkParams, tol: float = 1e-3) -> list[tuple[int, int]]:
    """Neuron pairs of the first hidden layer with identical incoming weights (and biases).

    For odd activations a sign-flipped copy also counts as a duplicate.
    """
    W = net.w if net.b is None else np.hstack([net.w, net.b[:, None]])
    out = []
    for i in range(W.shape[0]):
        for j in range(i + 1, W.shape[0]):
            d = np.max(np.abs(W[i] - W[j]))
            if net.act.odd:
                d = min(d, np.max(np.abs(W[i] + W[j])))
            if d < tol:
                out.append((i, j))
    return out
