"""Two-neuron erf toy: limit loss sweep, gamma-alpha surface and trajectories.

    python scripts/run_toy.py --out results/toy
"""

import argparse
from dataclasses import replace

from chaninf.experiments import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=6, help="inits searched for finite minima")
    ap.add_argument("--steps", type=int, default=6000, help="flow steps along the channel")
    ap.add_argument("--out", default="results/toy")
    args = ap.parse_args()

    cfg = ExperimentConfig(kind="toy_analytic", seeds=list(range(args.seeds)), out=args.out)
    cfg = replace(cfg, flow=replace(cfg.flow, max_steps=args.steps))
    for row in run_experiment(cfg).summary:
        print(row)


if __name__ == "__main__":
    main()
