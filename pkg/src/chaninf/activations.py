"""Smooth scalar activations with derivatives up to third order.

Every activation is exposed as an :class:`Activation` bundle of four
vectorised maps ``(value, d1, d2, d3)`` operating on float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf, expit

Array = np.ndarray
_SQRT2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class Activation:
    name: str
    value: Callable[[Array], Array]
    d1: Callable[[Array], Array]
    d2: Callable[[Array], Array]
    d3: Callable[[Array], Array]
    odd: bool = False

    def derivative(self, order: int) -> Callable[[Array], Array]:
        return (self.value, self.d1, self.d2, self.d3)[order]


def softplus(x):
    x = np.asarray(x, dtype=float)
    # x + log1p(exp(-x)) for x > 0 avoids overflow
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(-np.abs(x))))


def _sig_d1(x, k=1.0):
    p = expit(k * x)
    return k * p * (1.0 - p)


def _sig_d2(x, k=1.0):
    p = expit(k * x)
    return k * k * p * (1.0 - p) * (1.0 - 2.0 * p)


def _sig_d3(x, k=1.0):
    p = expit(k * x)
    return k**3 * p * (1.0 - p) * (1.0 - 6.0 * p + 6.0 * p * p)


def _erf_value(x):
    return erf(np.asarray(x, dtype=float) / _SQRT2)


def _erf_d1(x):
    x = np.asarray(x, dtype=float)
    return _SQRT_2_OVER_PI * np.exp(-0.5 * x * x)


def _erf_d2(x):
    x = np.asarray(x, dtype=float)
    return -x * _erf_d1(x)


def _erf_d3(x):
    x = np.asarray(x, dtype=float)
    return (x * x - 1.0) * _erf_d1(x)


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _tanh_d3(x):
    t = np.tanh(x)
    return (6.0 * t * t - 2.0) * (1.0 - t * t)


SOFTPLUS = Activation(
    "softplus",
    softplus,
    lambda x: expit(np.asarray(x, dtype=float)),
    _sig_d1,
    _sig_d2,
)

ERF_SCALED = Activation("erf_scaled", _erf_value, _erf_d1, _erf_d2, _erf_d3, odd=True)

TANH = Activation("tanh", np.tanh, _tanh_d1, _tanh_d2, _tanh_d3, odd=True)

SIGMOID4_PLUS_SOFTPLUS = Activation(
    "sigmoid4_plus_softplus",
    lambda x: expit(4.0 * np.asarray(x, dtype=float)) + softplus(x),
    lambda x: _sig_d1(x, 4.0) + expit(np.asarray(x, dtype=float)),
    lambda x: _sig_d2(x, 4.0) + _sig_d1(x),
    lambda x: _sig_d3(x, 4.0) + _sig_d2(x),
)

ACTIVATIONS: dict[str, Activation] = {
    a.name: a for a in (SOFTPLUS, ERF_SCALED, TANH, SIGMOID4_PLUS_SOFTPLUS)
}


def get_activation(name: str | Activation) -> Activation:
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
