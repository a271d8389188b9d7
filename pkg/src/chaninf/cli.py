"""Command-line entry point: ``chaninf <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys

from .data import TargetSpec
from .experiments import ExperimentConfig, run_experiment
from .flow import FlowConfig

SUBCOMMANDS = {
    "train-sweep": "train_sweep",
    "saddle-perturb": "saddle_perturb",
    "channel-follow": "channel_follow",
    "toy-analytic": "toy_analytic",
    "eigen-track": "eigen_track",
    "dataset-gen": "dataset_gen",
}


def _widths(s: str) -> list[list[int]]:
    """``"2-3-1,2-4-1"`` -> ``[[2, 3, 1], [2, 4, 1]]``."""
    return [[int(v) for v in arch.split("-")] for arch in s.split(",") if arch]


def _seeds(s: str) -> list[int]:
    """``"0:200"`` is a range, ``"1,5,7"`` an explicit list."""
    if ":" in s:
        lo, hi = s.split(":")
        return list(range(int(lo), int(hi)))
    return [int(v) for v in s.split(",") if v]


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chaninf", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="master seed (target draw and base seed)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for seed sweeps")
    p.add_argument("--config", default=None, help="JSON file; its values override flags")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--target", choices=["rosenbrock_mod", "gp_matern32", "erf_pair_teacher"])
        s.add_argument("--dim", type=int)
        s.add_argument("--gp-scale", type=float)
        s.add_argument("--n", type=int, help="grid points per axis (2-D) or sample count")
        s.add_argument("--widths", type=_widths, help="e.g. 2-3-1,2-4-1")
        s.add_argument("--activation", choices=["softplus", "erf_scaled", "tanh", "sigmoid4_plus_softplus"])
        s.add_argument("--bias", dest="has_bias", action="store_true", default=None)
        s.add_argument("--no-bias", dest="has_bias", action="store_false")
        s.add_argument("--seeds", type=_seeds, help="range a:b or list")
        s.add_argument("--solver", choices=["heun_fixed", "rk45_adaptive", "linear_implicit"])
        s.add_argument("--reltol", type=float)
        s.add_argument("--abstol", type=float)
        s.add_argument("--max-steps", type=int)
        s.add_argument("--stiff-after", type=int)
        s.add_argument("--h-max", type=float)
        s.add_argument("--maxnorm", type=float)
        s.add_argument("--grad-tol", type=float)
        s.add_argument("--record-every", type=int)
        s.add_argument("--norm-threshold", type=float)
        s.add_argument("--cos-threshold", type=float)
        s.add_argument("--gammas", type=_floats)
        s.add_argument("--alpha", type=float)
        s.add_argument("--halvings", type=int)
        s.add_argument("--relax-steps", type=int)
    return p


_FLOW_FLAGS = ("solver", "reltol", "abstol", "max_steps", "stiff_after", "h_max", "maxnorm",
               "grad_tol", "record_every")
_TOP_FLAGS = ("n", "widths", "activation", "has_bias", "seeds", "norm_threshold",
              "cos_threshold", "gammas", "alpha", "halvings", "relax_steps")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig(kind=SUBCOMMANDS[args.command])
    d = base.to_dict()
    for k in _TOP_FLAGS:
        if getattr(args, k, None) is not None:
            d[k] = getattr(args, k)
    for k in _FLOW_FLAGS:
        if getattr(args, k, None) is not None:
            d["flow"][k] = getattr(args, k)
    tgt = d["target"]
    if args.target is not None:
        tgt["kind"] = args.target
    if args.dim is not None:
        tgt["dim"] = args.dim
    if args.gp_scale is not None:
        tgt["gp_scale"] = args.gp_scale
    if args.seed is not None:
        tgt["seed"] = args.seed
        d["base_seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    if args.jobs is not None:
        d["jobs"] = args.jobs
    if args.config:
        with open(args.config) as fh:
            over = json.load(fh)
        for k, v in over.items():
            if k in ("flow", "target") and isinstance(v, dict):
                d[k].update(v)
            else:
                d[k] = v
    d["kind"] = SUBCOMMANDS[args.command]
    d["flow"] = FlowConfig(**d["flow"])
    d["target"] = TargetSpec(**d["target"])
    return ExperimentConfig.from_dict(d)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ValueError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    outcome = run_experiment(cfg)
    print(f"{cfg.kind}: {len(outcome.records)} records, {outcome.aborted} aborted -> {cfg.out}")
    return 1 if outcome.aborted else 0


if __name__ == "__main__":
    sys.exit(main())
