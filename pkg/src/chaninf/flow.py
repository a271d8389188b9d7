"""Gradient-flow integration with a max-norm regularizer, plus SGD/ADAM baselines."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .net import Dataset, LossFunction, NetworkParams, NonFiniteError, _loss_and_gradient_xy

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

STOP_REASONS = ("grad_converged", "maxnorm_exceeded", "patience", "max_steps", "max_time",
                "t_end", "nonfinite", "stiff")


class StiffnessError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    solver: str = "rk45_adaptive"
    reltol: float = 1e-3
    abstol: float = 1e-6
    max_steps: int = 100_000
    patience: int = 1_000_000
    max_time: float = 3600.0
    maxnorm: float = 1e3
    grad_tol: float = 1e-8
    record_every: int = 1
    heun_h: float = 1e-2
    h0: float = 1e-3
    improvement_tol: float = 1e-14
    t_end: float | None = None
    # switch to linearly implicit Euler after this many steps (needs a Hessian)
    stiff_after: int | None = None
    h_max: float = 1e6

    def __post_init__(self):
        if self.solver not in ("heun_fixed", "rk45_adaptive", "linear_implicit"):
            raise ValueError(f"unknown solver {self.solver!r}")
        for name in ("reltol", "abstol", "maxnorm", "grad_tol", "heun_h", "h0", "h_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.record_every < 1 or self.max_steps < 1:
            raise ValueError("record_every and max_steps must be >= 1")


@dataclass
class FlowResult:
    theta: np.ndarray
    stop_reason: str
    t: np.ndarray
    loss: np.ndarray
    grad_linf: np.ndarray
    pnorm: np.ndarray
    # (step index, theta) at steps 0, 1, 2, 4, 8, ... and the final step
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)
    # (step index, theta_step - theta_{step-1}) at every recorded step
    updates: list[tuple[int, np.ndarray]] = field(default_factory=list)
    steps: int = 0
    template: NetworkParams | None = None

    @property
    def final_loss(self) -> float:
        return float(self.loss[-1])

    @property
    def final_pnorm(self) -> float:
        return float(np.linalg.norm(self.theta))

    def net(self, theta=None) -> NetworkParams:
        if self.template is None:
            raise ValueError("result has no network template")
        return self.template.with_theta(self.theta if theta is None else theta)

    def series_records(self) -> list[dict]:
        return [
            {"t": float(t), "loss": float(l), "grad_linf": float(g), "pnorm": float(p)}
            for t, l, g, p in zip(self.t, self.loss, self.grad_linf, self.pnorm)
        ]

    def write_jsonl(self, path, extra: dict | None = None) -> None:
        """One JSON object per recorded step, then a final record with the stop reason."""
        with open(path, "w") as fh:
            for rec in self.series_records():
                fh.write(json.dumps(rec) + "\n")
            final = {"final": True, "stop_reason": self.stop_reason, "steps": self.steps,
                     "theta": self.theta.tolist()}
            if self.template is not None:
                final["network"] = self.template.with_theta(self.theta).to_dict()
            if extra:
                final.update(extra)
            fh.write(json.dumps(final) + "\n")


def read_jsonl(path) -> tuple[list[dict], dict]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return rows[:-1], rows[-1]


# -- steppers ---------------------------------------------------------------

def heun_step(f: Callable[[np.ndarray], np.ndarray], y, h: float):
    if not h > 0:
        raise ValueError("step size must be positive")
    y = np.asarray(y, dtype=float)
    k1 = f(y)
    k2 = f(y + h * k1)
    return y + 0.5 * h * (k1 + k2)


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

_SAFETY, _ALPHA, _BETA = 0.9, 0.7 / 5, 0.4 / 5
_MIN_FACTOR, _MAX_FACTOR = 0.2, 5.0
H_MIN = 1e-14


class RKStep(NamedTuple):
    y: np.ndarray
    h_next: float
    accepted: bool
    err: float
    f_new: np.ndarray | None  # vector field at y (first-same-as-last reuse)
    h_used: float | None = None  # set when the stepper shortened the requested step


def rk45_adaptive_step(f, y, h: float, reltol: float, abstol: float,
                       err_prev: float = 1.0, f0: np.ndarray | None = None) -> RKStep:
    """One attempted Dormand-Prince step with PI step-size control.

    Returns the new state (``y`` unchanged if rejected), the proposed next
    step size, the acceptance flag, the scaled error norm and, if accepted,
    the vector field at the new state.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    if h < H_MIN:
        raise StiffnessError(f"step size {h:.3e} underflowed")
    y = np.asarray(y, dtype=float)
    k = [f(y) if f0 is None else f0]
    for i in range(1, 7):
        yi = y + h * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
        k.append(f(yi))
    y_new = y + h * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
    err_vec = h * sum(e * kj for e, kj in zip(_E, k))
    scale = abstol + reltol * np.maximum(np.abs(y), np.abs(y_new))
    err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
    if not np.isfinite(err):
        return RKStep(y, h * _MIN_FACTOR, False, np.inf, None)
    if err <= 1.0:
        if err == 0.0:
            factor = _MAX_FACTOR
        else:
            factor = _SAFETY * err ** (-_ALPHA) * max(err_prev, 1e-4) ** _BETA
            factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
        return RKStep(y_new, h * factor, True, err, k[6])
    factor = max(_MIN_FACTOR, _SAFETY * err ** (-1 / 5))
    return RKStep(y, h * factor, False, err, None)


def linear_implicit_step(f, jac, y, h: float, reltol: float, abstol: float) -> RKStep:
    """Linearly implicit Euler with step doubling and Richardson extrapolation.

    Solves ``(I - h J-) dy = h f(y)`` where ``J-`` keeps only the decaying
    eigen-directions of the symmetrised Jacobian, so the system is always
    positive definite. Growing directions (negative curvature of the loss) are
    stepped explicitly, and the step is shortened to ``0.9 / lambda_max`` when
    the fastest growth rate would otherwise be resolved by less than one step.
    The error estimate is the difference between one full step and two half
    steps.
    """
    if h < H_MIN:
        raise StiffnessError(f"step size {h:.3e} underflowed")
    y = np.asarray(y, dtype=float)

    def spectrum(yy):
        J = jac(yy)
        if not np.all(np.isfinite(J)):
            return None
        return np.linalg.eigh(0.5 * (J + J.T))

    def solve(yy, hh, fy, eig):
        if eig is None or not np.all(np.isfinite(fy)):
            return None
        lam, V = eig
        return yy + V @ ((V.T @ (hh * fy)) / (1.0 - hh * np.minimum(lam, 0.0)))

    eig0 = spectrum(y)
    if eig0 is None:
        return RKStep(y, h * 0.25, False, np.inf, None)
    h_req = h
    grow = float(eig0[0][-1])
    if grow * h > 1.0:
        h = 0.9 / grow
        if h < H_MIN:
            raise StiffnessError(f"step size {h:.3e} underflowed")
    f0 = f(y)
    full = solve(y, h, f0, eig0)
    half = solve(y, 0.5 * h, f0, eig0)
    two = None if half is None else solve(half, 0.5 * h, f(half), spectrum(half))
    h_used = None if h == h_req else h
    if full is None or two is None:
        return RKStep(y, h * 0.25, False, np.inf, None)
    err_vec = two - full
    y_new = two + err_vec
    scale = abstol + reltol * np.maximum(np.abs(y), np.abs(y_new))
    err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
    if not np.isfinite(err):
        return RKStep(y, h * 0.25, False, np.inf, None)
    factor = _MAX_FACTOR if err == 0.0 else min(_MAX_FACTOR, max(_MIN_FACTOR, _SAFETY / np.sqrt(err)))
    if err <= 1.0:
        return RKStep(y_new, h * factor, True, err, None, h_used)
    return RKStep(y, h * factor, False, err, None)


# -- gradient flow ----------------------------------------------------------

def maxnorm_penalty(theta, maxnorm: float) -> tuple[float, np.ndarray]:
    """``R = (|theta| - maxnorm)^3 / 3`` beyond the threshold, zero inside."""
    nrm = float(np.linalg.norm(theta))
    if nrm <= maxnorm:
        return 0.0, np.zeros_like(theta)
    excess = nrm - maxnorm
    return excess**3 / 3.0, excess**2 * theta / nrm


def maxnorm_penalty_hessian(theta, maxnorm: float) -> np.ndarray:
    nrm = float(np.linalg.norm(theta))
    P = theta.size
    if nrm <= maxnorm:
        return np.zeros((P, P))
    excess = nrm - maxnorm
    u = theta / nrm
    return 2.0 * excess * np.outer(u, u) + excess**2 / nrm * (np.eye(P) - np.outer(u, u))


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def integrate_flow(objective: Objective, theta0, cfg: FlowConfig,
                   template: NetworkParams | None = None,
                   hessian: Callable[[np.ndarray], np.ndarray] | None = None) -> FlowResult:
    """Integrate ``dtheta/dt = -grad(L + R)`` from ``theta0`` until a stop rule fires.

    ``objective`` maps a flat parameter vector to ``(loss, gradient)``;
    ``hessian`` (Hessian of L) is required by the linearly implicit stage.
    """
    if (cfg.solver == "linear_implicit" or cfg.stiff_after is not None) and hessian is None:
        raise ValueError("linearly implicit stepping needs a Hessian")
    theta = np.array(theta0, dtype=float)
    last: dict = {}

    def evaluate(th):
        loss, g = objective(th)
        r, gr = maxnorm_penalty(th, cfg.maxnorm)
        total = loss + r
        if not np.isfinite(total):
            raise NonFiniteError("non-finite loss")
        last["val"] = (loss, g, total)
        return -(g + gr)

    def jacobian(th):
        return -(hessian(th) + maxnorm_penalty_hessian(th, cfg.maxnorm))

    f_cur = evaluate(theta)
    loss, g, total = last["val"]

    ts, ls = [0.0], [loss]
    gs, ps = [float(np.max(np.abs(g)))], [float(np.linalg.norm(theta))]
    snapshots = [(0, theta.copy())]
    updates: list[tuple[int, np.ndarray]] = []

    t, h, err_prev = 0.0, cfg.h0, 1.0
    best, since_improvement, steps = total, 0, 0
    reltol, retried = cfg.reltol, False
    prev = theta
    t_start = time.monotonic()

    while True:
        if np.linalg.norm(theta) >= cfg.maxnorm:
            stop = "maxnorm_exceeded"
        elif cfg.t_end is not None and t >= cfg.t_end * (1 - 1e-14):
            stop = "t_end"
        elif np.max(np.abs(g)) < cfg.grad_tol:
            stop = "grad_converged"
        elif steps >= cfg.max_steps:
            stop = "max_steps"
        elif since_improvement >= cfg.patience:
            stop = "patience"
        elif time.monotonic() - t_start > cfg.max_time:
            stop = "max_time"
        else:
            stop = None
        if stop is not None:
            break

        try:
            implicit = cfg.solver == "linear_implicit" or (
                cfg.stiff_after is not None and steps >= cfg.stiff_after)
            if implicit:
                if cfg.t_end is not None:
                    h = min(h, cfg.t_end - t)
                while True:
                    atol = min(cfg.abstol, float(np.max(np.abs(f_cur))))
                    res = linear_implicit_step(evaluate, jacobian, theta, min(h, cfg.h_max),
                                               reltol, atol)
                    if res.accepted:
                        break
                    h = res.h_next
                h_used = res.h_used if res.h_used is not None else min(h, cfg.h_max)
                new, h = res.y, res.h_next
                f_cur = evaluate(new)
            elif cfg.solver == "heun_fixed":
                h_used = cfg.heun_h if cfg.t_end is None else min(cfg.heun_h, cfg.t_end - t)
                new = heun_step(evaluate, theta, h_used)
                f_cur = evaluate(new)
            else:
                if cfg.t_end is not None:
                    h = min(h, cfg.t_end - t)
                while True:
                    # near a critical point the absolute tolerance follows the gradient scale,
                    # otherwise steps settle at the stability boundary and never converge
                    atol = min(cfg.abstol, float(np.max(np.abs(f_cur))))
                    res = rk45_adaptive_step(evaluate, theta, h, reltol, atol, err_prev, f_cur)
                    if res.accepted:
                        break
                    h = res.h_next
                new, h_used, h = res.y, h, res.h_next
                err_prev = max(res.err, 1e-4)
                f_cur = res.f_new
        except NonFiniteError:
            stop = "nonfinite"
            break
        except StiffnessError:
            if retried:
                stop = "stiff"
                break
            # one retry with a tighter tolerance from the last accepted state
            retried, reltol, h = True, reltol * 0.5, cfg.h0
            continue

        loss, g, total = last["val"]
        t += h_used
        steps += 1
        prev, theta = theta, new
        if total < best - cfg.improvement_tol:
            best, since_improvement = total, 0
        else:
            since_improvement += 1
        if _is_power_of_two(steps):
            snapshots.append((steps, theta.copy()))
        if steps % cfg.record_every == 0:
            _append(ts, ls, gs, ps, updates, t, steps, theta, prev, loss, g)

    if steps > 0 and (not updates or updates[-1][0] != steps):
        _append(ts, ls, gs, ps, updates, t, steps, theta, prev, loss, g)
    if snapshots[-1][0] != steps:
        snapshots.append((steps, theta.copy()))
    return FlowResult(theta=theta, stop_reason=stop, t=np.array(ts), loss=np.array(ls),
                      grad_linf=np.array(gs), pnorm=np.array(ps), snapshots=snapshots,
                      updates=updates, steps=steps, template=template)


def _append(ts, ls, gs, ps, updates, t, step, theta, prev, loss, g):
    ts.append(t)
    ls.append(float(loss))
    gs.append(float(np.max(np.abs(g))))
    ps.append(float(np.linalg.norm(theta)))
    updates.append((step, theta - prev))


def integrate_gradient_flow(net: NetworkParams, data: Dataset, cfg: FlowConfig) -> FlowResult:
    obj = LossFunction(net, data)
    needs_h = cfg.solver == "linear_implicit" or cfg.stiff_after is not None
    return integrate_flow(obj.loss_and_grad, net.flatten(), cfg, template=net,
                          hessian=obj.hessian if needs_h else None)


# -- stochastic baselines ---------------------------------------------------

def _minibatch_run(net: NetworkParams, data: Dataset, batch: int, epochs: int, seed: int,
                   update) -> FlowResult:
    if not 1 <= batch <= data.n:
        raise ValueError(f"batch size {batch} outside [1, {data.n}]")
    rng = np.random.default_rng(seed)
    theta = net.flatten()
    X, y = data.inputs, data.targets

    def full(th):
        return _loss_and_gradient_xy(net.with_theta(th), X, y)

    loss, g = full(theta)
    ts, ls, gs, ps = [0.0], [loss], [float(np.max(np.abs(g)))], [float(np.linalg.norm(theta))]
    snapshots = [(0, theta.copy())]
    updates: list[tuple[int, np.ndarray]] = []
    stop = "max_steps"
    step = 0
    for epoch in range(1, epochs + 1):
        start = theta.copy()
        order = rng.permutation(data.n)
        try:
            for k in range(0, data.n - batch + 1, batch):
                idx = order[k:k + batch]
                _, gb = _loss_and_gradient_xy(net.with_theta(theta), X[idx], y[idx])
                step += 1
                theta = theta + update(gb, step)
            loss, g = full(theta)
        except NonFiniteError:
            stop = "nonfinite"
            theta = start
            break
        if not (np.isfinite(loss) and np.all(np.isfinite(theta))):
            stop = "nonfinite"
            theta = start
            break
        ts.append(float(epoch))
        ls.append(loss)
        gs.append(float(np.max(np.abs(g))))
        ps.append(float(np.linalg.norm(theta)))
        updates.append((epoch, theta - start))
        if _is_power_of_two(epoch):
            snapshots.append((epoch, theta.copy()))
    if snapshots[-1][0] != len(ts) - 1:
        snapshots.append((len(ts) - 1, theta.copy()))
    return FlowResult(theta=theta, stop_reason=stop, t=np.array(ts), loss=np.array(ls),
                      grad_linf=np.array(gs), pnorm=np.array(ps), snapshots=snapshots,
                      updates=updates, steps=step, template=net)


def run_sgd(net: NetworkParams, data: Dataset, lr: float = 0.1, batch: int = 16,
            epochs: int = 100, seed: int = 0) -> FlowResult:
    """Shuffled minibatch SGD; one recorded point per epoch (``t`` = epoch)."""
    return _minibatch_run(net, data, batch, epochs, seed, lambda gb, step: -lr * gb)


def run_adam(net: NetworkParams, data: Dataset, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps_adam: float = 1e-8, batch: int = 16,
             epochs: int = 100, seed: int = 0) -> FlowResult:
    m = np.zeros(net.n_params)
    v = np.zeros(net.n_params)

    def update(gb, step):
        m[:] = beta1 * m + (1 - beta1) * gb
        v[:] = beta2 * v + (1 - beta2) * gb * gb
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        return -lr * m_hat / (np.sqrt(v_hat) + eps_adam)

    return _minibatch_run(net, data, batch, epochs, seed, update)
