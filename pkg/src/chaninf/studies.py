"""Desk-scale statistical studies built on the experiment runners.

These are the aggregate measurements behind the acceptance suite and the
scripts in ``scripts/``: channel frequencies across target suites, the
plateau-saddle contrast with and without biases, and channel following.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import TargetSpec
from .experiments import ExperimentConfig, experiment_dataset, follow_channel, run_train_sweep
from .flow import FlowConfig
from .net import NetworkParams

SWEEP_FLOW = FlowConfig(max_steps=8000, stiff_after=300, record_every=10, h_max=1e12)


@dataclass
class SuiteStats:
    name: str
    runs: int
    counts: dict
    channel_freq: float
    parallel_fractions: list[float]
    seconds: float
    channels: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"name": self.name, "runs": self.runs, "counts": self.counts,
                "channel_freq": self.channel_freq,
                "median_parallel_fraction": (float(np.median(self.parallel_fractions))
                                             if self.parallel_fractions else float("nan")),
                "seconds": self.seconds}


def channel_suite(kind: str, gp_scale: float = 1.0, *, n: int = 10, widths=(2, 4, 1),
                  target_seeds=(0,), init_seeds=range(10), activation: str = "softplus",
                  has_bias: bool = True, flow: FlowConfig = SWEEP_FLOW,
                  name: str | None = None) -> SuiteStats:
    """Train ``len(target_seeds) * len(init_seeds)`` nets and tally their classifications.

    GP targets are redrawn per target seed and shared across initialisations;
    deterministic targets ignore the target seeds beyond the first.
    """
    if kind != "gp_matern32":
        target_seeds = tuple(target_seeds)[:1]
    t0 = time.perf_counter()
    records = []
    for ts in target_seeds:
        cfg = ExperimentConfig(kind="train_sweep", n=n, widths=[list(widths)],
                               target=TargetSpec(kind, widths[0], gp_scale, seed=ts),
                               activation=activation, has_bias=has_bias, seeds=list(init_seeds),
                               flow=flow)
        for rec in run_train_sweep(cfg).records:
            rec["target_seed"] = ts
            records.append(rec)
    counts: dict = {}
    for r in records:
        counts[r["classification"]] = counts.get(r["classification"], 0) + 1
    channels = [r for r in records if r.get("is_channel")]
    pf = [r["parallel_fraction_late"] for r in channels if np.isfinite(r["parallel_fraction_late"])]
    if name is None:
        name = f"{kind}(s={gp_scale:g})" if kind == "gp_matern32" else kind
    return SuiteStats(name,
                      len(records), counts, len(channels) / len(records), pf,
                      time.perf_counter() - t0, channels)


@dataclass
class PlateauStats:
    has_bias: bool
    runs: int
    finite: int
    duplicates: int
    by_width: dict = field(default_factory=dict)
    seconds: float = 0.0
    merged_any: int = 0  # runs of any kind (channels included) with duplicated input weights

    @property
    def duplicate_freq(self) -> float:
        """Share of converged (finite-norm) solutions containing a duplicated neuron."""
        return self.duplicates / self.finite if self.finite else float("nan")

    def to_dict(self) -> dict:
        return {"has_bias": self.has_bias, "runs": self.runs, "finite": self.finite,
                "duplicates": self.duplicates, "duplicate_freq": self.duplicate_freq,
                "merged_any": self.merged_any,
                "by_width": self.by_width, "seconds": self.seconds}


def plateau_contrast(has_bias: bool, *, hidden=(2, 3, 4, 5), seeds=range(50), n: int = 10,
                     activation: str = "sigmoid4_plus_softplus", flow: FlowConfig = SWEEP_FLOW,
                     dup_tol: float = 1e-3) -> PlateauStats:
    """Duplicate-neuron frequency on the 2-D rosenbrock task, pooled over hidden widths."""
    t0 = time.perf_counter()
    cfg = ExperimentConfig(kind="train_sweep", n=n, widths=[[2, r, 1] for r in hidden],
                           target=TargetSpec("rosenbrock_mod", 2), activation=activation,
                           has_bias=has_bias, seeds=list(seeds), flow=flow, dup_tol=dup_tol)
    recs = run_train_sweep(cfg).records
    by_width, runs, fin, dup = {}, 0, 0, 0
    merged = sum(bool(x.get("duplicate_pairs")) for x in recs)
    for ci, r in enumerate(hidden):
        rr = [x for x in recs if x["config_index"] == ci]
        finite = [x for x in rr if x["classification"] == "finite"]
        d = sum(bool(x["duplicate_pairs"]) for x in finite)
        by_width[r] = {"runs": len(rr), "finite": len(finite), "duplicates": d}
        runs, fin, dup = runs + len(rr), fin + len(finite), dup + d
    return PlateauStats(has_bias, runs, fin, dup, by_width, time.perf_counter() - t0, merged)


def follow_record(cfg: ExperimentConfig, record: dict, data) -> dict:
    """Jump procedure on the closest first-layer pair of a detected channel run."""
    layer, i, j = record["closest_pair"]
    if layer != 0:
        raise ValueError("only first-layer pairs can be followed")
    net = NetworkParams.from_flat(np.asarray(record["theta"]), cfg.widths[0], cfg.activation,
                                  cfg.has_bias)
    return follow_channel(cfg, net, data, (i, j))


def suite_dataset(kind: str, gp_scale: float = 1.0, n: int = 10, dim: int = 2, seed: int = 0):
    return experiment_dataset(ExperimentConfig(n=n, target=TargetSpec(kind, dim, gp_scale, seed=seed)))


__all__ = ["SWEEP_FLOW", "SuiteStats", "PlateauStats", "channel_suite", "plateau_contrast",
           "follow_record", "suite_dataset"]
