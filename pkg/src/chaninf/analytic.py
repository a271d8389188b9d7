"""Population loss of erf networks under standard-normal inputs.

The activation is ``s(z) = erf(z / sqrt2) = 2 G(z) - 1`` with ``G`` the standard
normal CDF. Pairwise expectations ``<s(w_j.x + b_j) s(w_k.x + b_k)>`` depend only
on the biases and overlaps and reduce to a bivariate normal CDF, which is
evaluated through Owen's T function with Gauss-Legendre quadrature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import ndtr, roots_hermite

from .net import NetworkParams

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LEGENDRE_ORDER = 64
# the toy teacher has slope 5; lower orders leave errors near 1e-3 in l(w,0)
HERMITE_ORDER = 2000


@dataclass(frozen=True)
class QuadratureRule:
    kind: str
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.nodes.size

    def normal_expectation(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """``E[f(x)]`` for ``x ~ N(0, 1)``; Hermite rules only."""
        if self.kind != "gauss_hermite":
            raise ValueError("normal expectations need a Gauss-Hermite rule")
        x = np.sqrt(2.0) * self.nodes
        return float(self.weights @ f(x) / np.sqrt(np.pi))


@lru_cache(maxsize=None)
def gauss_legendre(n: int = LEGENDRE_ORDER) -> QuadratureRule:
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule("gauss_legendre", x, w)


@lru_cache(maxsize=None)
def gauss_hermite(n: int = HERMITE_ORDER) -> QuadratureRule:
    x, w = roots_hermite(n)
    return QuadratureRule("gauss_hermite", x, w)


def std_normal_cdf(z):
    return ndtr(z)


def std_normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


# -- Owen's T ---------------------------------------------------------------

def _owens_t_small(h: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Quadrature of ``(1/2pi) int_0^a exp(-h^2 (1+x^2)/2) / (1+x^2) dx`` for ``|a| <= 1``."""
    rule = gauss_legendre()
    x = 0.5 * a[..., None] * (rule.nodes + 1.0)
    hh = (h * h)[..., None]
    f = np.exp(-0.5 * hh * (1.0 + x * x)) / (1.0 + x * x)
    return 0.5 * a * (f @ rule.weights) / (2.0 * np.pi)


def owens_t(h, a):
    """Owen's T function, vectorised over broadcast ``h`` and ``a``."""
    h, a = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(a, dtype=float))
    scalar = h.ndim == 0
    h = np.abs(np.atleast_1d(h)).astype(float)
    a = np.atleast_1d(a).astype(float)
    sign = np.sign(a)
    a = np.abs(a)
    out = np.zeros_like(h)
    small = a <= 1.0
    if np.any(small):
        out[small] = _owens_t_small(h[small], a[small])
    big = ~small & np.isfinite(a)
    if np.any(big):
        hb, ab = h[big], a[big]
        ah = ab * hb
        gh, gah = ndtr(hb), ndtr(ah)
        out[big] = 0.5 * gh + 0.5 * gah - gh * gah - _owens_t_small(ah, 1.0 / ab)
    inf = np.isinf(a)
    if np.any(inf):
        out[inf] = 0.5 * ndtr(-h[inf])
    out = sign * out
    return float(out[0]) if scalar else out


# -- bivariate normal CDF ---------------------------------------------------

def bvn_cdf(mu1, mu2, rho):
    """``P(X <= mu1, Y <= mu2)`` for standard normals with correlation ``rho``."""
    m1, m2, r = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu1, mu2, rho)))
    scalar = m1.ndim == 0
    m1, m2, r = (np.atleast_1d(v).astype(float) for v in (m1, m2, r))
    out = np.empty_like(m1)
    g1, g2 = ndtr(m1), ndtr(m2)

    hi = r >= 1.0
    lo = r <= -1.0
    out[hi] = np.minimum(g1, g2)[hi]
    out[lo] = np.maximum(g1 + g2 - 1.0, 0.0)[lo]
    inner = ~(hi | lo)
    s = np.sqrt(np.where(inner, 1.0 - r * r, 1.0))

    both0 = inner & (m1 == 0) & (m2 == 0)
    out[both0] = 0.25 + np.arcsin(r[both0]) / (2.0 * np.pi)
    z1 = inner & (m1 == 0) & (m2 != 0)
    out[z1] = 0.5 * g2[z1] + owens_t(m2[z1], r[z1] / s[z1])
    z2 = inner & (m2 == 0) & (m1 != 0)
    out[z2] = 0.5 * g1[z2] + owens_t(m1[z2], r[z2] / s[z2])

    gen = inner & (m1 != 0) & (m2 != 0)
    if np.any(gen):
        a1, a2, rr, ss = m1[gen], m2[gen], r[gen], s[gen]
        out[gen] = (owens_t(a1, a2 / a1) + owens_t(a2, a1 / a2)
                    - owens_t(a1, (a2 - rr * a1) / (a1 * ss))
                    - owens_t(a2, (a1 - rr * a2) / (a2 * ss))
                    + g1[gen] * g2[gen])
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def bvn_pdf(h, k, rho):
    h, k, rho = (np.asarray(v, dtype=float) for v in (h, k, rho))
    s2 = 1.0 - rho * rho
    return np.exp(-(h * h - 2 * rho * h * k + k * k) / (2 * s2)) / (2 * np.pi * np.sqrt(s2))


# -- pair expectation -------------------------------------------------------

def erf_pair_expectation(mu1, mu2, s11, s12, s22):
    """``g = <s(z1 + mu1) s(z2 + mu2)>`` with ``Var z1 = s11``, ``Cov = s12``, ``Var z2 = s22``."""
    n1 = np.sqrt(1.0 + np.asarray(s11, dtype=float))
    n2 = np.sqrt(1.0 + np.asarray(s22, dtype=float))
    h1, h2 = mu1 / n1, mu2 / n2
    r = np.clip(s12 / (n1 * n2), -1.0, 1.0)
    return 4.0 * bvn_cdf(h1, h2, r) - 2.0 * ndtr(h1) - 2.0 * ndtr(h2) + 1.0


def erf_pair_expectation_grad(mu1, mu2, s11, s12, s22):
    """``g`` and its partials ``(d/dmu1, d/dmu2, d/ds11, d/ds12, d/ds22)``; needs ``|rho| < 1``."""
    mu1, mu2, s11, s12, s22 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu1, mu2, s11, s12, s22)))
    n1, n2 = np.sqrt(1.0 + s11), np.sqrt(1.0 + s22)
    h1, h2 = mu1 / n1, mu2 / n2
    r = s12 / (n1 * n2)
    if np.any(np.abs(r) >= 1.0):
        raise ValueError("gradient of g undefined at |rho| = 1")
    sr = np.sqrt(1.0 - r * r)
    g = 4.0 * bvn_cdf(h1, h2, r) - 2.0 * ndtr(h1) - 2.0 * ndtr(h2) + 1.0
    p1, p2 = std_normal_pdf(h1), std_normal_pdf(h2)
    dg_dh1 = 4.0 * p1 * ndtr((h2 - r * h1) / sr) - 2.0 * p1
    dg_dh2 = 4.0 * p2 * ndtr((h1 - r * h2) / sr) - 2.0 * p2
    dg_dr = 4.0 * bvn_pdf(h1, h2, r)
    d_mu1 = dg_dh1 / n1
    d_mu2 = dg_dh2 / n2
    d_s11 = -0.5 * (dg_dh1 * h1 + dg_dr * r) / (1.0 + s11)
    d_s22 = -0.5 * (dg_dh2 * h2 + dg_dr * r) / (1.0 + s22)
    d_s12 = dg_dr / (n1 * n2)
    return g, (d_mu1, d_mu2, d_s11, d_s12, d_s22)


def erf_mean(mu, s):
    """``<s(z + mu)>`` for ``z ~ N(0, s)``."""
    return 2.0 * ndtr(mu / np.sqrt(1.0 + s)) - 1.0


# -- population loss --------------------------------------------------------

@dataclass
class PopLossSpec:
    """Erf teacher network plus the student architecture (one hidden layer)."""

    teacher_a: np.ndarray
    teacher_w: np.ndarray  # (r*, d)
    teacher_b: np.ndarray | None = None
    r: int = 2
    has_bias: bool = False
    _f2: float = field(default=np.nan, init=False, repr=False)

    def __post_init__(self):
        self.teacher_a = np.asarray(self.teacher_a, dtype=float)
        self.teacher_w = np.atleast_2d(np.asarray(self.teacher_w, dtype=float))
        if self.teacher_w.shape[0] != self.teacher_a.size:
            raise ValueError("teacher_a and teacher_w disagree on width")
        if self.teacher_b is None:
            self.teacher_b = np.zeros(self.teacher_a.size)
        self.teacher_b = np.asarray(self.teacher_b, dtype=float)
        Q = self.teacher_w @ self.teacher_w.T
        q = np.diag(Q)
        G = erf_pair_expectation(self.teacher_b[:, None], self.teacher_b[None, :],
                                 q[:, None], Q, q[None, :])
        self._f2 = float(self.teacher_a @ G @ self.teacher_a)

    @property
    def dim(self) -> int:
        return self.teacher_w.shape[1]

    @property
    def teacher_sq_mean(self) -> float:
        """``<f*^2>``, computed once."""
        return self._f2

    @property
    def teacher_mean(self) -> float:
        q = np.sum(self.teacher_w**2, axis=1)
        return float(self.teacher_a @ erf_mean(self.teacher_b, q))

    def widths(self) -> list[int]:
        return [self.dim, self.r, 1]

    def teacher(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        from scipy.special import erf

        return erf((X @ self.teacher_w.T + self.teacher_b) / np.sqrt(2.0)) @ self.teacher_a

    def student(self, theta) -> NetworkParams:
        if isinstance(theta, NetworkParams):
            if theta.act.name != "erf_scaled" or theta.depth != 1:
                raise ValueError("population loss needs a one-hidden-layer erf_scaled net")
            return theta
        return NetworkParams.from_flat(np.asarray(theta, dtype=float), self.widths(),
                                       "erf_scaled", self.has_bias)


def _student_parts(spec: PopLossSpec, theta):
    net = spec.student(theta)
    W, a = net.w, net.a
    b = net.biases[0] if net.has_bias else np.zeros(a.size)
    c0 = float(net.biases[1][0]) if net.has_bias else 0.0
    return net, W, a, b, c0


def population_loss(spec: PopLossSpec, theta) -> float:
    """``1/2 <(f* - f)^2>`` over standard-normal inputs."""
    _, W, a, b, c0 = _student_parts(spec, theta)
    Ws, As, Bs = spec.teacher_w, spec.teacher_a, spec.teacher_b
    Q = W @ W.T
    q = np.diag(Q)
    qs = np.sum(Ws**2, axis=1)
    R = Ws @ W.T
    cross = erf_pair_expectation(Bs[:, None], b[None, :], qs[:, None], R, q[None, :])
    self_ = erf_pair_expectation(b[:, None], b[None, :], q[:, None], Q, q[None, :])
    loss = 0.5 * spec.teacher_sq_mean - As @ cross @ a + 0.5 * a @ self_ @ a
    if c0:
        loss += 0.5 * c0**2 - c0 * spec.teacher_mean + c0 * float(a @ erf_mean(b, q))
    return float(loss)


def population_gradient(spec: PopLossSpec, theta) -> np.ndarray:
    """Analytic gradient of :func:`population_loss`, in the flat layout of the student."""
    net, W, a, b, c0 = _student_parts(spec, theta)
    Ws, As, Bs = spec.teacher_w, spec.teacher_a, spec.teacher_b
    Q = W @ W.T
    q = np.diag(Q)
    qs = np.sum(Ws**2, axis=1)
    R = Ws @ W.T

    gc, (_, dc_mu2, _, dc_s12, dc_s22) = erf_pair_expectation_grad(
        Bs[:, None], b[None, :], qs[:, None], R, q[None, :])
    gs, (ds_mu1, _, ds_s11, ds_s12, _) = erf_pair_expectation_grad(
        b[:, None], b[None, :], q[:, None], Q, q[None, :])

    Ac = As[:, None] * a[None, :]  # a*_j a_k
    Aa = a[:, None] * a[None, :]
    grad_a = -(As @ gc) + gs @ a
    grad_W = (-(Ac * dc_s12).T @ Ws - 2.0 * np.sum(Ac * dc_s22, axis=0)[:, None] * W
              + (Aa * ds_s12) @ W + 2.0 * np.sum(Aa * ds_s11, axis=1)[:, None] * W)
    grad_b = -np.sum(Ac * dc_mu2, axis=0) + np.sum(Aa * ds_mu1, axis=1)

    grad_c0 = 0.0
    if net.has_bias:
        m = erf_mean(b, q)
        grad_c0 = c0 - spec.teacher_mean + float(a @ m)
        if c0:
            nrm = np.sqrt(1.0 + q)
            pdf = std_normal_pdf(b / nrm)
            grad_a = grad_a + c0 * m
            grad_b = grad_b + c0 * a * 2.0 * pdf / nrm
            grad_W = grad_W + (c0 * a * 2.0 * pdf * (-0.5 * b / nrm**3) * 2.0)[:, None] * W

    weights = [grad_W, grad_a[None, :]]
    biases = [grad_b, np.array([grad_c0])] if net.has_bias else None
    return NetworkParams(weights, biases, "erf_scaled").flatten()


def population_objective(spec: PopLossSpec):
    """``theta -> (loss, grad)`` for :func:`chaninf.flow.integrate_flow`."""
    return lambda th: (population_loss(spec, th), population_gradient(spec, th))


def population_hessian(spec: PopLossSpec, theta, h: float = 1e-6) -> np.ndarray:
    """Central differences of the analytic population gradient, symmetrised."""
    theta = np.asarray(theta, dtype=float)
    H = np.empty((theta.size, theta.size))
    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = h
        H[:, k] = (population_gradient(spec, theta + e) - population_gradient(spec, theta - e)) / (2 * h)
    return 0.5 * (H + H.T)


# -- toy problem: the eps -> 0 limit of a two-neuron scalar-input student ---

def toy_teacher_spec() -> PopLossSpec:
    """``erf((5x + 2.5)/sqrt2) + erf((5x - 2.5)/sqrt2)`` as a two-neuron erf teacher."""
    return PopLossSpec(np.ones(2), np.array([[5.0], [5.0]]), np.array([2.5, -2.5]), r=2)


def _teacher_callable(teacher):
    if isinstance(teacher, PopLossSpec):
        return lambda x: teacher.teacher(np.asarray(x)[:, None])
    return teacher


def _toy_pieces(w: float, x: np.ndarray):
    from .activations import ERF_SCALED as s

    z = w * x
    return s.value(z), s.d1(z), s.d2(z), s.d3(z)


def optimal_readouts(w: float, teacher, quad: QuadratureRule | None = None) -> tuple[float, float]:
    """``(a0, c0)`` minimising the eps=0 loss ``<[c s(wx) + a x s'(wx) - f*]^2>``."""
    quad = quad or gauss_hermite()
    f = _teacher_callable(teacher)
    x = np.sqrt(2.0) * quad.nodes
    wt = quad.weights / np.sqrt(np.pi)
    s0, s1, _, _ = _toy_pieces(w, x)
    fx = f(x)
    u = x * s1
    A = np.array([[wt @ (u * u), wt @ (s0 * u)], [wt @ (u * s0), wt @ (s0 * s0)]])
    rhs = np.array([wt @ (fx * u), wt @ (fx * s0)])
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    if not abs(det) > 1e-14 * max(1.0, np.abs(A).max()) ** 2:
        raise np.linalg.LinAlgError(f"readout system singular at w={w}")
    a0, c0 = np.linalg.solve(A, rhs)
    return float(a0), float(c0)


def readout_residual(w: float, a0: float, c0: float, teacher,
                     quad: QuadratureRule | None = None) -> float:
    quad = quad or gauss_hermite()
    f = _teacher_callable(teacher)
    x = np.sqrt(2.0) * quad.nodes
    wt = quad.weights / np.sqrt(np.pi)
    s0, s1, _, _ = _toy_pieces(w, x)
    u = x * s1
    r = c0 * s0 + a0 * u - f(x)
    return float(max(abs(wt @ (r * u)), abs(wt @ (r * s0))))


def limit_loss_and_h(w: float, teacher, quad: QuadratureRule | None = None):
    """``(l(w,0), h(w), a0, c0)`` with readouts at their optimum."""
    quad = quad or gauss_hermite()
    a0, c0 = optimal_readouts(w, teacher, quad)
    f = _teacher_callable(teacher)
    x = np.sqrt(2.0) * quad.nodes
    wt = quad.weights / np.sqrt(np.pi)
    s0, s1, s2, s3 = _toy_pieces(w, x)
    f0 = c0 * s0 + a0 * x * s1
    f2 = 0.5 * c0 * x**2 * s2 + a0 / 6.0 * x**3 * s3
    res = f0 - f(x)
    return float(0.5 * wt @ res**2), float(wt @ (f2 * res)), a0, c0


@dataclass
class WSweep:
    w: np.ndarray
    loss: np.ndarray
    h: np.ndarray
    a0: np.ndarray
    c0: np.ndarray

    @property
    def stable(self) -> np.ndarray:
        return self.h > 0

    def critical_points(self) -> list[tuple[float, str]]:
        """Sign changes of the centred derivative of ``l(w,0)``, labelled min / max."""
        d = np.gradient(self.loss, self.w)
        out = []
        for k in range(len(d) - 1):
            if d[k] == 0 or d[k] * d[k + 1] < 0:
                w0 = self.w[k] - d[k] * (self.w[k + 1] - self.w[k]) / (d[k + 1] - d[k])
                out.append((float(w0), "min" if d[k] < 0 else "max"))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["w", "loss0", "h", "a0", "c0", "stable"])
            for row in zip(self.w, self.loss, self.h, self.a0, self.c0, self.stable):
                wr.writerow([repr(float(v)) for v in row[:5]] + [int(row[5])])


def w_sweep(ws, teacher, quad: QuadratureRule | None = None) -> WSweep:
    quad = quad or gauss_hermite()
    rows = np.array([limit_loss_and_h(float(w), teacher, quad) for w in ws])
    return WSweep(np.asarray(ws, dtype=float), *rows.T)


def toy_theta(w: float, eps: float, a: float, c: float) -> np.ndarray:
    """Flat student parameters ``(w1, w2, a1, a2)`` from scalar pair coordinates."""
    return np.array([w + eps, w - eps, 0.5 * (c + a / eps), 0.5 * (c - a / eps)])


def toy_coords(theta) -> tuple[float, float, float, float]:
    """``(w, eps, a, c)`` from flat ``(w1, w2, a1, a2)``; eps is signed for scalar input."""
    w1, w2, a1, a2 = np.asarray(theta, dtype=float)
    eps = 0.5 * (w1 - w2)
    return 0.5 * (w1 + w2), eps, eps * (a1 - a2), a1 + a2


# -- gamma-alpha phase portrait ---------------------------------------------

def single_neuron_optimum(teacher: PopLossSpec, starts=(0.5, 1.0, 2.0, 4.0)) -> tuple[float, float]:
    """Best one-neuron fit ``(w*, a*)`` of a scalar-input teacher under the population loss."""
    from scipy.optimize import minimize

    spec = PopLossSpec(teacher.teacher_a, teacher.teacher_w, teacher.teacher_b, r=1)
    best = None
    for w0 in starts:
        res = minimize(lambda th: population_loss(spec, th), np.array([w0, 1.0]),
                       jac=lambda th: population_gradient(spec, th), method="BFGS",
                       options={"gtol": 1e-12})
        if best is None or res.fun < best.fun:
            best = res
    w, a = best.x
    return (float(w), float(a)) if w > 0 else (float(-w), float(-a))


@dataclass
class ToyPlane:
    """Saddle line of the duplicated one-neuron optimum and its soft transverse direction."""
    w_star: float
    a_star: float
    e_min: np.ndarray
    gamma_ref: float

    def line(self, gamma: float) -> np.ndarray:
        return np.array([self.w_star, self.w_star, gamma * self.a_star, (1 - gamma) * self.a_star])

    @property
    def u(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0, -1.0]) / np.sqrt(2.0)

    def basis_rest(self) -> np.ndarray:
        """Orthonormal (4, 2) basis of the complement of ``u`` and ``e_min``."""
        q, _ = np.linalg.qr(np.column_stack([self.u, self.e_min, np.eye(4)]))
        return q[:, 2:4]

    def project(self, theta) -> tuple[float, float]:
        """``(gamma, alpha)`` coordinates of a parameter vector."""
        d = np.asarray(theta, dtype=float) - self.line(0.0)
        gamma = float(d @ np.array([0.0, 0.0, 1.0, -1.0])) / (2.0 * self.a_star)
        alpha = float((np.asarray(theta) - self.line(self.gamma_ref)) @ self.e_min)
        return gamma, alpha


def toy_plane(teacher: PopLossSpec, gamma_ref: float = 2.0, h: float = 1e-6) -> ToyPlane:
    w_s, a_s = single_neuron_optimum(teacher)
    proto = ToyPlane(w_s, a_s, np.zeros(4), gamma_ref)
    H = population_hessian(teacher, proto.line(gamma_ref), h)
    # the line direction is an exact null direction; drop it before picking the minimum
    P = np.eye(4) - np.outer(proto.u, proto.u)
    vals, vecs = np.linalg.eigh(P @ H @ P)
    keep = np.abs(vecs.T @ proto.u) < 0.5
    e_min = vecs[:, keep][:, np.argmin(vals[keep])]
    if e_min[0] < 0:
        e_min = -e_min
    return ToyPlane(w_s, a_s, e_min, gamma_ref)


@dataclass
class GammaAlphaSurface:
    gammas: np.ndarray
    alphas: np.ndarray
    loss: np.ndarray  # (len(gammas), len(alphas))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["gamma", "alpha", "loss"])
            for i, g in enumerate(self.gammas):
                for j, a in enumerate(self.alphas):
                    wr.writerow([repr(float(g)), repr(float(a)), repr(float(self.loss[i, j]))])


def gamma_alpha_surface(teacher: PopLossSpec, plane: ToyPlane, gammas, alphas) -> GammaAlphaSurface:
    """Loss minimised over the two directions orthogonal to the (gamma, alpha) plane."""
    from scipy.optimize import minimize

    B = plane.basis_rest()
    gammas, alphas = np.asarray(gammas, dtype=float), np.asarray(alphas, dtype=float)
    out = np.empty((gammas.size, alphas.size))
    for i, g in enumerate(gammas):
        z = np.zeros(2)
        for j, al in enumerate(alphas):
            anchor = plane.line(g) + al * plane.e_min
            res = minimize(lambda v: population_loss(teacher, anchor + B @ v), z,
                           jac=lambda v: B.T @ population_gradient(teacher, anchor + B @ v),
                           method="BFGS")
            z = res.x if np.isfinite(res.fun) else np.zeros(2)
            out[i, j] = res.fun
    return GammaAlphaSurface(gammas, alphas, out)
