"""Regression targets, input sampling, normalisation and Glorot initialisation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from .net import Dataset, NetworkParams

ROSENBROCK_CONSTANTS = dict(a=1.0, b=3.0, c=1.0, d=0.1)
GP_SCALES = (0.1, 0.5, 2.0, 10.0)
JITTER_SCHEDULE = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *labels: str | int) -> int:
    """Child seed for a named stream: splitmix64 chained over the master seed and labels.

    Labels are folded in through their UTF-8 bytes, so ``derive_seed(s, "data")`` and
    ``derive_seed(s, "init")`` never coincide in practice.
    """
    x = splitmix64(int(master) & _MASK64)
    for label in labels:
        for byte in str(label).encode():
            x = splitmix64(x ^ byte)
        x = splitmix64(x ^ 0xFF)
    return x


@dataclass
class TargetSpec:
    kind: str = "rosenbrock_mod"  # rosenbrock_mod | gp_matern32 | erf_pair_teacher
    dim: int = 2
    gp_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("rosenbrock_mod", "gp_matern32", "erf_pair_teacher"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "rosenbrock_mod" and self.dim < 2:
            raise ValueError("rosenbrock needs dim >= 2")
        if self.kind == "gp_matern32" and not self.gp_scale > 0:
            raise ValueError("gp scale must be positive")


def rosenbrock_target(x) -> np.ndarray | float:
    """log10 of the modified Rosenbrock sum; works on one point or rows of a matrix."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] < 2:
        raise ValueError("rosenbrock needs d >= 2")
    k = ROSENBROCK_CONSTANTS
    prev, cur = X[:, :-1], X[:, 1:]
    s = np.sum((k["a"] - prev) ** 2 + k["b"] * (cur - prev**2 + k["c"]) ** 2, axis=1) + k["d"]
    out = np.log10(s)
    return float(out[0]) if single else out


def zscore(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    m = v.mean()
    sd = np.sqrt(np.mean((v - m) ** 2))
    if sd == 0 or not np.isfinite(sd):
        raise ValueError("zscore of constant values")
    return (v - m) / sd


def grid_inputs(n_per_axis: int, d: int = 2) -> np.ndarray:
    """Regular grid on ``[-sqrt(3), sqrt(3)]^d`` (unit variance per axis as n grows)."""
    axis = np.linspace(-np.sqrt(3.0), np.sqrt(3.0), n_per_axis)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def matern32_kernel(x, xp, s: float):
    if not s > 0:
        raise ValueError("scale must be positive")
    r = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(xp, dtype=float), axis=-1)
    u = np.sqrt(3.0) * s * r
    return (1.0 + u) * np.exp(-u)


def matern32_matrix(X: np.ndarray, s: float) -> np.ndarray:
    X = np.atleast_2d(X)
    sq = np.sum(X * X, axis=1)
    r2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    u = np.sqrt(3.0) * s * np.sqrt(r2)
    K = (1.0 + u) * np.exp(-u)
    np.fill_diagonal(K, 1.0)
    return 0.5 * (K + K.T)


def sample_gp_target(inputs, s: float, seed: int, normalize: bool = True) -> np.ndarray:
    """One draw from the zero-mean Matern-3/2 Gaussian process at ``inputs``."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if X.shape[0] > 4096:
        raise ValueError("GP sampling is limited to 4096 points")
    K = matern32_matrix(X, s)
    L = None
    for jitter in JITTER_SCHEDULE:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(K)))
            break
        except np.linalg.LinAlgError:
            continue
    if L is None:
        raise np.linalg.LinAlgError(f"Cholesky failed with jitter up to {JITTER_SCHEDULE[-1]}")
    y = L @ np.random.default_rng(seed).standard_normal(len(K))
    return zscore(y) if normalize else y


def glorot_normal(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_out, fan_in))


def glorot_normal_init(widths: Sequence[int], seed: int, activation: str = "softplus",
                       has_bias: bool = False) -> NetworkParams:
    """Glorot-normal weights with zero biases; each layer draws from its own derived stream."""
    weights = [
        glorot_normal(fi, fo, np.random.default_rng(derive_seed(seed, "layer", l)))
        for l, (fi, fo) in enumerate(zip(widths[:-1], widths[1:]))
    ]
    biases = [np.zeros(fo) for fo in widths[1:]] if has_bias else None
    return NetworkParams(weights, biases, activation)


def erf_pair_teacher(x) -> np.ndarray:
    """The one-dimensional toy target ``erf((5x+2.5)/sqrt2) + erf((5x-2.5)/sqrt2)``."""
    x = np.asarray(x, dtype=float)
    return erf((5 * x + 2.5) / np.sqrt(2)) + erf((5 * x - 2.5) / np.sqrt(2))


def make_dataset(spec: TargetSpec, n: int, grid: bool | None = None) -> Dataset:
    """Build a normalised dataset for ``spec``.

    ``n`` is the number of points per axis for 2-D grids and the sample count
    otherwise. Inputs are a grid for d=2 (unless ``grid=False``) and i.i.d.
    standard normal for other dimensions.
    """
    d = 1 if spec.kind == "erf_pair_teacher" else spec.dim
    use_grid = (d == 2) if grid is None else grid
    if use_grid:
        X = grid_inputs(n, d)
    else:
        X = np.random.default_rng(derive_seed(spec.seed, "inputs")).standard_normal((n, d))
    if spec.kind == "rosenbrock_mod":
        y = zscore(rosenbrock_target(X))
    elif spec.kind == "gp_matern32":
        y = sample_gp_target(X, spec.gp_scale, derive_seed(spec.seed, "gp"))
    else:
        y = erf_pair_teacher(X[:, 0])
    return Dataset(X, y)


def input_scheme(spec: TargetSpec, grid: bool | None = None) -> str:
    d = 1 if spec.kind == "erf_pair_teacher" else spec.dim
    use_grid = (d == 2) if grid is None else grid
    return "grid" if use_grid else "standard_normal"


def write_dataset(data: Dataset, csv_path, spec: TargetSpec | None = None,
                  json_path=None, scheme: str | None = None) -> None:
    """CSV with input columns then the target column, plus a JSON descriptor sidecar."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(data.dim)] + ["y"])
        for x, y in zip(data.inputs, data.targets):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
    desc = {"N": data.n, "d": data.dim}
    if spec is not None:
        desc.update(kind=spec.kind, s=spec.gp_scale, seed=spec.seed, spec=asdict(spec))
    if scheme is not None:
        desc["input_scheme"] = scheme
    if json_path is None:
        json_path = str(csv_path).rsplit(".", 1)[0] + ".json"
    with open(json_path, "w") as fh:
        json.dump(desc, fh, indent=2)


def read_dataset(csv_path) -> Dataset:
    arr = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    return Dataset(arr[:, :-1], arr[:, -1])
