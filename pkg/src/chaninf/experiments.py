"""Experiment runners behind the command-line interface.

Each runner takes an :class:`ExperimentConfig`, writes ``config.json``,
``runs.jsonl`` and ``summary.csv`` into ``cfg.out`` and returns an
:class:`ExperimentOutcome`.
"""

from __future__ import annotations

import csv
import json
import traceback
import warnings
from functools import partial
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import analytic
from .channels import (ChannelReport, detect_channels, jump_procedure, loss_eps2_fit,
                       merge_channel_pair, parallel_update_fraction,
                       slope_law_fit)
from .data import TargetSpec, glorot_normal_init, input_scheme, make_dataset, write_dataset
from .flow import FlowConfig, FlowResult, integrate_flow, integrate_gradient_flow, run_adam, run_sgd
from .landscape import (DegenerateEigenWarning, SaddleLine, count_unique, duplicate_pairs,
                        perturb_along_eigvec, track_line_eigen)
from .net import Dataset, NetworkParams, loss_and_gradient

EXPERIMENT_KINDS = ("train_sweep", "saddle_perturb", "channel_follow", "toy_analytic",
                    "eigen_track", "dataset_gen")


@dataclass
class ExperimentConfig:
    kind: str = "train_sweep"
    target: TargetSpec = field(default_factory=TargetSpec)
    n: int = 20  # points per axis on 2-D grids, sample count otherwise
    widths: list[list[int]] = field(default_factory=lambda: [[2, 3, 1]])
    activation: str = "softplus"
    has_bias: bool = False
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    flow: FlowConfig = field(default_factory=lambda: FlowConfig(max_steps=6000, stiff_after=500,
                                                                record_every=10))
    norm_threshold: float = 1e3
    cos_threshold: float = 0.01
    unique_tol: float = 1e-4
    dup_tol: float = 1e-3
    out: str = "results"
    jobs: int = 1
    # saddle_perturb / eigen_track
    base_seed: int = 0
    gammas: list[float] = field(default_factory=lambda: [-0.5, 0.25, 0.5, 0.75, 1.5])
    alpha: float = 1e-5
    escape_tol: float = 1e-3
    # channel_follow
    halvings: int = 10
    relax_steps: int = 200
    # toy_analytic
    w_grid: list[float] = field(default_factory=lambda: list(np.linspace(0.05, 8.0, 800)))
    toy_samples: int = 4096
    surface_gammas: list[float] = field(default_factory=lambda: list(np.linspace(-1.0, 4.0, 21)))
    surface_alphas: list[float] = field(default_factory=lambda: list(np.linspace(-1.5, 1.5, 21)))
    toy_epochs: int = 200

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if isinstance(self.target, dict):
            self.target = TargetSpec(**self.target)
        if isinstance(self.flow, dict):
            self.flow = FlowConfig(**self.flow)
        if not self.seeds:
            raise ValueError("seed list is empty")
        for w in self.widths:
            if len(w) < 3 or w[-1] != 1:
                raise ValueError(f"architecture {w} must have >= 1 hidden layer and scalar output")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("w_grid", "surface_gammas", "surface_alphas"):
            d[k] = [float(v) for v in getattr(self, k)]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ExperimentOutcome:
    records: list[dict]
    summary: list[dict]
    aborted: int = 0


# -- output -----------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else repr(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_outputs(cfg: ExperimentConfig, outcome: ExperimentOutcome) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(_jsonable(cfg.to_dict()), fh, indent=2)
    with open(out / "runs.jsonl", "w") as fh:
        for rec in outcome.records:
            fh.write(json.dumps(_jsonable(rec)) + "\n")
    keys: list[str] = []
    for row in outcome.summary:
        keys += [k for k in row if k not in keys]
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        for row in outcome.summary:
            wr.writerow(_jsonable(row))
    return out


# -- shared pieces ----------------------------------------------------------

def experiment_dataset(cfg: ExperimentConfig) -> Dataset:
    return make_dataset(cfg.target, cfg.n)


def classify(res: FlowResult, report: ChannelReport) -> str:
    if res.stop_reason == "grad_converged":
        return "finite"
    if report.is_channel:
        return "channel"
    if res.stop_reason == "maxnorm_exceeded":
        return "infinite"
    return "other"


def late_parallel_fraction(res: FlowResult, report: ChannelReport, late: float = 0.5) -> float:
    """Median parallel-update fraction over the last ``late`` share of recorded updates."""
    if not report.groups:
        return float("nan")
    frac = parallel_update_fraction(res, report)
    if frac.size == 0:
        return float("nan")
    return float(np.median(frac[int(len(frac) * (1 - late)):]))


def series_dict(res: FlowResult) -> dict:
    return {"t": res.t, "loss": res.loss, "grad_linf": res.grad_linf, "pnorm": res.pnorm}


def train_one(cfg: ExperimentConfig, cfg_index: int, seed: int, data: Dataset) -> dict:
    widths = cfg.widths[cfg_index]
    rec: dict = {"config_index": cfg_index, "widths": widths, "seed": seed,
                 "activation": cfg.activation, "has_bias": cfg.has_bias}
    try:
        net = glorot_normal_init(widths, seed, cfg.activation, cfg.has_bias)
        res = integrate_gradient_flow(net, data, cfg.flow)
        report = detect_channels(res, cfg.norm_threshold, cfg.cos_threshold)
        final = res.net()
        dups = duplicate_pairs(final, cfg.dup_tol) if final.depth == 1 else []
        rec.update(
            stop_reason=res.stop_reason, steps=res.steps, final_loss=res.final_loss,
            grad_linf=float(res.grad_linf[-1]), pnorm=res.final_pnorm,
            classification=classify(res, report), is_channel=report.is_channel,
            min_cosdist=report.min_cosdist, closest_pair=list(report.closest_pair),
            closest_sum_abs_a=report.closest_sum_abs_a, group_sizes=report.group_sizes,
            duplicate_pairs=[list(p) for p in dups],
            parallel_fraction_late=(late_parallel_fraction(res, report)
                                    if report.is_channel else float("nan")),
            theta=res.theta, series=series_dict(res), aborted=False,
        )
    except Exception as exc:  # recorded, sweep continues
        rec.update(stop_reason="error", classification="error", aborted=True,
                   error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
    return rec


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = [pool.submit(fn, *it) for it in items]
        return [f.result() for f in futs]


# -- train sweep ------------------------------------------------------------

def summarize_sweep(cfg: ExperimentConfig, records: list[dict]) -> list[dict]:
    """Per-architecture aggregates; a pure function of the run records."""
    rows = []
    for ci, widths in enumerate(cfg.widths):
        recs = [r for r in records if r["config_index"] == ci]
        ok = [r for r in recs if not r["aborted"]]
        finite = [r for r in ok if r["classification"] == "finite"]
        n = len(recs)
        counts = {k: sum(r["classification"] == k for r in recs)
                  for k in ("finite", "channel", "infinite", "other", "error")}
        nets = [NetworkParams.from_flat(np.asarray(r["theta"]), widths, cfg.activation, cfg.has_bias)
                for r in finite]
        n_dup = sum(bool(r["duplicate_pairs"]) for r in finite)
        pf = [r["parallel_fraction_late"] for r in ok
              if r["is_channel"] and np.isfinite(r["parallel_fraction_late"])]
        rows.append({
            "config_index": ci, "widths": "-".join(map(str, widths)), "runs": n, **counts,
            "channel_freq": counts["channel"] / n if n else float("nan"),
            "duplicate_freq": n_dup / n if n else float("nan"),
            "duplicate_freq_finite": n_dup / len(finite) if finite else float("nan"),
            "unique_finite": count_unique(nets, cfg.unique_tol) if nets and nets[0].depth == 1 else len(nets),
            "unique_tol": cfg.unique_tol,
            "median_parallel_fraction": float(np.median(pf)) if pf else float("nan"),
        })
    return rows


def run_train_sweep(cfg: ExperimentConfig) -> ExperimentOutcome:
    data = experiment_dataset(cfg)
    items = [(cfg, ci, s, data) for ci in range(len(cfg.widths)) for s in cfg.seeds]
    records = _map(train_one, items, cfg.jobs)
    records.sort(key=lambda r: (r["config_index"], r["seed"]))
    return ExperimentOutcome(records, summarize_sweep(cfg, records),
                             sum(r["aborted"] for r in records))


# -- saddle perturbation ----------------------------------------------------

def converged_base(cfg: ExperimentConfig, data: Dataset, widths=None, max_tries: int = 50):
    """First seed from ``cfg.base_seed`` on whose flow converges at finite norm."""
    widths = widths or cfg.widths[0]
    for seed in range(cfg.base_seed, cfg.base_seed + max_tries):
        net = glorot_normal_init(widths, seed, cfg.activation, cfg.has_bias)
        res = integrate_gradient_flow(net, data, cfg.flow)
        if res.stop_reason == "grad_converged":
            return res.net(), seed
    raise RuntimeError("no converged base network found")


def perturb_one(cfg: ExperimentConfig, line: SaddleLine, data: Dataset, gamma: float,
                sign: int) -> dict:
    rec = {"gamma": gamma, "sign": sign, "alpha": cfg.alpha}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateEigenWarning)
        start = perturb_along_eigvec(line, data, gamma, cfg.alpha, sign)
    rec["degenerate_eigenpair"] = any(issubclass(w.category, DegenerateEigenWarning) for w in caught)
    line_loss = loss_and_gradient(line.at(gamma), data)[0]
    res = integrate_gradient_flow(start, data, cfg.flow)
    dist = line.distance(res.theta)
    rec.update(stop_reason=res.stop_reason, line_loss=line_loss, final_loss=res.final_loss,
               distance_to_line=dist, pnorm=res.final_pnorm,
               projected_gamma=line.projected_gamma(res.net()),
               outcome="returned" if dist < cfg.escape_tol else "escaped",
               series=series_dict(res), aborted=res.stop_reason in ("nonfinite", "stiff"))
    return rec


def run_saddle_perturb(cfg: ExperimentConfig) -> ExperimentOutcome:
    data = experiment_dataset(cfg)
    base, seed = converged_base(cfg, data)
    # split the neuron with the most negative output weight
    idx = int(np.argmin(base.a))
    line = SaddleLine(base, idx)
    records = []
    for g in cfg.gammas:
        for sign in (1, -1):
            try:
                records.append(perturb_one(cfg, line, data, float(g), sign))
            except Exception as exc:
                records.append({"gamma": g, "sign": sign, "aborted": True,
                                "error": f"{type(exc).__name__}: {exc}"})
    track = track_line_eigen(line, data, np.asarray(cfg.gammas, dtype=float))
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    track.to_csv(Path(cfg.out) / "eigen_track.csv")
    summary = [{k: r.get(k) for k in ("gamma", "sign", "line_loss", "final_loss",
                                       "distance_to_line", "outcome", "degenerate_eigenpair")}
               for r in records]
    for r in records:
        r["base_seed"] = seed
        r["neuron_idx"] = idx
    return ExperimentOutcome(records, summary, sum(bool(r.get("aborted")) for r in records))


def run_eigen_track(cfg: ExperimentConfig) -> ExperimentOutcome:
    data = experiment_dataset(cfg)
    base, seed = converged_base(cfg, data)
    idx = int(np.argmin(base.a))
    line = SaddleLine(base, idx)
    gammas = np.asarray(cfg.gammas, dtype=float)
    track = track_line_eigen(line, data, gammas)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    track.to_csv(Path(cfg.out) / "eigen_track.csv")
    flagged = set(track.flagged)
    records = [{"gamma": float(g), "eigenvalues": track.curves[k], "flagged": k in flagged,
                "base_seed": seed, "neuron_idx": idx, "aborted": False}
               for k, g in enumerate(track.gammas)]
    scale = np.abs(track.sorted_eigs).max(axis=1)
    summary = [{"gamma": float(g), "min_eig": float(track.sorted_eigs[k, 0]),
                "near_zero": int(np.sum(np.abs(track.sorted_eigs[k]) < 1e-6 * scale[k])),
                "flagged": k in flagged} for k, g in enumerate(track.gammas)]
    return ExperimentOutcome(records, summary)


# -- channel following ------------------------------------------------------

def follow_channel(cfg: ExperimentConfig, net: NetworkParams, data: Dataset, pair) -> dict:
    # deep in a channel reltol*|a_i| admits O(1) errors in the cancelling readouts, so
    # explicit steps can raise the loss; relax with the linearly implicit stage only
    relax = replace(cfg.flow, solver="linear_implicit", stiff_after=None, max_steps=cfg.relax_steps,
                    grad_tol=1e-14, maxnorm=1e15, record_every=1)
    jr = jump_procedure(net, data, pair, cfg.halvings, relax)
    eps = jr.series("eps")
    rec = {"jump_stop": jr.stop_reason, "jump": [r.to_dict() for r in jr.records]}
    try:
        rec["slope_exponent"] = slope_law_fit(eps, jr.series("loss"), jr.series("a_diff"))
    except ValueError as exc:
        rec["slope_exponent"], rec["slope_error"] = float("nan"), str(exc)
    try:
        rec["loss_eps2_slope"], rec["loss_limit"] = loss_eps2_fit(eps, jr.series("loss"))
    except ValueError as exc:
        rec["loss_eps2_slope"], rec["loss_eps2_error"] = float("nan"), str(exc)
    glu = jr.series("glu_error")
    rec["glu_ratios"] = glu[1:] / glu[:-1]
    rec["merge_candidates"] = [list(p) for p in [pair]]
    rec["merged_loss"] = loss_and_gradient(merge_channel_pair(jr.net, pair), data)[0]
    return rec


def run_channel_follow(cfg: ExperimentConfig) -> ExperimentOutcome:
    data = experiment_dataset(cfg)
    records = []
    for seed in cfg.seeds:
        rec = train_one(cfg, 0, seed, data)
        if rec["aborted"] or not rec["is_channel"]:
            rec["followed"] = False
            records.append(rec)
            continue
        net = NetworkParams.from_flat(np.asarray(rec["theta"]), cfg.widths[0], cfg.activation,
                                      cfg.has_bias)
        layer, i, j = rec["closest_pair"]
        if layer != 0:
            rec["followed"] = False
            records.append(rec)
            continue
        rec["followed"] = True
        try:
            rec.update(follow_channel(cfg, net, data, (i, j)))
        except Exception as exc:
            rec.update(aborted=True, error=f"{type(exc).__name__}: {exc}")
        records.append(rec)
    summary = [{"seed": r["seed"], "classification": r.get("classification"),
                "followed": r.get("followed"), "slope_exponent": r.get("slope_exponent"),
                "loss_eps2_slope": r.get("loss_eps2_slope"),
                "parallel_fraction_late": r.get("parallel_fraction_late")} for r in records]
    return ExperimentOutcome(records, summary, sum(bool(r.get("aborted")) for r in records))


# -- toy analytic -----------------------------------------------------------

def toy_channel_start(w_sweep: "analytic.WSweep", eps: float = 0.3):
    """Student parameters inside the low-loss channel: the best eps=0 minimum, opened to ``eps``."""
    mins = [w for w, kind in w_sweep.critical_points() if kind == "min"]
    if not mins:
        raise RuntimeError("no minimum of the eps=0 loss in the sweep")
    T = analytic.toy_teacher_spec()
    best = min(mins, key=lambda w: analytic.limit_loss_and_h(w, T)[0])
    _, _, a0, c0 = analytic.limit_loss_and_h(best, T)
    return analytic.toy_theta(best, eps, a0, c0), best


def _trajectory(res: FlowResult, theta0) -> np.ndarray:
    """Parameters at every step of a flow recorded with ``record_every=1``."""
    steps = np.array([u for _, u in res.updates]).reshape(-1, len(theta0))
    return np.vstack([theta0, theta0 + np.cumsum(steps, axis=0)])


def toy_flow_configs(cfg: ExperimentConfig) -> tuple[FlowConfig, FlowConfig]:
    """Relaxation onto the channel floor, then the monitored run along it.

    Both use the linearly implicit stage: the channel is stiff and RK45 barely
    moves eps in thousands of steps.
    """
    base = replace(cfg.flow, stiff_after=None, solver="linear_implicit", reltol=1e-6,
                   abstol=1e-9, grad_tol=1e-12, maxnorm=1e4, h_max=1e10, record_every=1)
    return replace(base, max_steps=cfg.relax_steps), base


def run_toy_analytic(cfg: ExperimentConfig) -> ExperimentOutcome:
    T = analytic.toy_teacher_spec()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    # (i) limit loss and stability along w
    sweep = analytic.w_sweep(np.asarray(cfg.w_grid), T)
    sweep.to_csv(out / "w_sweep.csv")
    crit = sweep.critical_points()
    records: list[dict] = [{"part": "w_sweep", "critical_points": crit, "aborted": False}]

    # (ii) loss over the (gamma, alpha) plane of the duplicated one-neuron optimum
    plane = analytic.toy_plane(T)
    surface = analytic.gamma_alpha_surface(T, plane, cfg.surface_gammas, cfg.surface_alphas)
    surface.to_csv(out / "gamma_alpha_surface.csv")
    records.append({"part": "gamma_alpha_surface", "w_star": plane.w_star, "a_star": plane.a_star,
                    "e_min": plane.e_min, "gamma_ref": plane.gamma_ref, "aborted": False})

    # (iii) trajectories
    obj = analytic.population_objective(T)
    hess = partial(analytic.population_hessian, T)
    relax_cfg, follow_cfg = toy_flow_configs(cfg)
    finite_losses = []
    for seed in cfg.seeds:
        net = glorot_normal_init([1, 2, 1], seed, "erf_scaled", False)
        res = integrate_flow(obj, net.flatten(), replace(follow_cfg, grad_tol=cfg.flow.grad_tol),
                             hessian=hess)
        eigs = np.linalg.eigvalsh(hess(res.theta))
        # stable: converged with no direction of negative curvature beyond FD noise
        finite = res.stop_reason == "grad_converged" and eigs[0] > -1e-6 * np.abs(eigs).max()
        if finite:
            finite_losses.append(res.final_loss)
        records.append({"part": "population_minimum", "seed": seed, "stop_reason": res.stop_reason,
                        "finite": finite, "min_eig": float(eigs[0]), "loss": res.final_loss,
                        "final_theta": res.theta,
                        "gamma_alpha": plane.project(res.theta),
                        "aborted": res.stop_reason in ("nonfinite", "stiff")})

    theta0, w_best = toy_channel_start(sweep)
    relax = integrate_flow(obj, theta0, relax_cfg, hessian=hess)
    follow = integrate_flow(obj, relax.theta, follow_cfg, hessian=hess)
    coords = np.array([analytic.toy_coords(th) for th in _trajectory(follow, relax.theta)])
    records.append({"part": "population_flow", "theta0": theta0, "w_channel": w_best,
                    "relax_stop": relax.stop_reason, "relaxed_theta": relax.theta,
                    "stop_reason": follow.stop_reason, "final_theta": follow.theta,
                    "series": series_dict(follow), "eps": np.abs(coords[:, 1]), "w": coords[:, 0],
                    "gamma_alpha": [plane.project(th) for _, th in follow.snapshots],
                    "limit_loss": analytic.limit_loss_and_h(w_best, T)[0],
                    "finite_minimum_losses": finite_losses,
                    "aborted": follow.stop_reason in ("nonfinite", "stiff")})

    rng = np.random.default_rng(cfg.base_seed)
    X = rng.standard_normal((cfg.toy_samples, 1))
    data = Dataset(X, T.teacher(X))
    template = NetworkParams.from_flat(relax.theta, [1, 2, 1], "erf_scaled", False)
    fin = integrate_gradient_flow(template, data, replace(follow_cfg, record_every=10))
    records.append({"part": "finite_data_flow", "stop_reason": fin.stop_reason,
                    "final_theta": fin.theta, "series": series_dict(fin),
                    "gamma_alpha": [plane.project(th) for _, th in fin.snapshots],
                    "aborted": fin.stop_reason in ("nonfinite", "stiff")})
    for name, runner, kw in (("sgd", run_sgd, {"lr": 0.1}), ("adam", run_adam, {})):
        res = runner(template, data, batch=16, epochs=cfg.toy_epochs, seed=cfg.base_seed, **kw)
        records.append({"part": name, "stop_reason": res.stop_reason, "final_theta": res.theta,
                        "final_coords": analytic.toy_coords(res.theta), "series": series_dict(res),
                        "gamma_alpha": [plane.project(th) for _, th in res.snapshots],
                        "aborted": res.stop_reason == "nonfinite"})

    summary = []
    for k, (w, kind) in enumerate(crit):
        loss0, h, _, _ = analytic.limit_loss_and_h(w, T)
        summary.append({"item": f"critical_point_{k}", "kind": kind, "w": w, "limit_loss": loss0,
                        "h": h})
    for r in records:
        if "final_theta" in r and r["part"] != "population_minimum":
            w, eps, _, _ = analytic.toy_coords(r["final_theta"])
            summary.append({"item": r["part"], "w": w, "eps": eps,
                            "population_loss": analytic.population_loss(T, r["final_theta"])})
    summary.append({"item": "finite_minima", "count": len(finite_losses),
                    "population_loss": min(finite_losses) if finite_losses else float("nan")})
    return ExperimentOutcome(records, summary, sum(bool(r.get("aborted")) for r in records))


# -- dataset generation -----------------------------------------------------

def run_dataset_gen(cfg: ExperimentConfig) -> ExperimentOutcome:
    data = experiment_dataset(cfg)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_dataset(data, Path(cfg.out) / "dataset.csv", cfg.target,
                  scheme=input_scheme(cfg.target))
    rec = {"N": data.n, "d": data.dim, "kind": cfg.target.kind, "aborted": False}
    return ExperimentOutcome([rec], [rec])


RUNNERS = {
    "train_sweep": run_train_sweep,
    "saddle_perturb": run_saddle_perturb,
    "channel_follow": run_channel_follow,
    "toy_analytic": run_toy_analytic,
    "eigen_track": run_eigen_track,
    "dataset_gen": run_dataset_gen,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentOutcome:
    outcome = RUNNERS[cfg.kind](cfg)
    write_outputs(cfg, outcome)
    return outcome
